fn main() {
    std::process::exit(symfuse::cli::execute(std::env::args_os()));
}
