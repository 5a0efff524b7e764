fn main() {
    std::process::exit(truewm::cli::run(std::env::args_os()));
}
