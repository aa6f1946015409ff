fn main() {
    std::process::exit(ostnet::cli::run_from(std::env::args_os()));
}
