fn main() {
    std::process::exit(bimem::cli::run(std::env::args_os()));
}
