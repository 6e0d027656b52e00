fn main() {
    std::process::exit(uqscan::cli::run(std::env::args_os()));
}
