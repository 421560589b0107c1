fn main() {
    std::process::exit(dpa::cli::run(std::env::args_os()));
}
