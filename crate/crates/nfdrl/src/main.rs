fn main() {
    std::process::exit(nfdrl::cli::run(std::env::args_os()));
}
