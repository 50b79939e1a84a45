fn main() {
    std::process::exit(flowlab::cli::run(std::env::args_os()));
}
