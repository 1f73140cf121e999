fn main() {
    std::process::exit(prefdyn::cli::run(std::env::args_os().collect()));
}
