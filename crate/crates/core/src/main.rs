fn main() {
    std::process::exit(zoprune::cli::run(std::env::args_os()));
}
