fn main() {
    std::process::exit(ortho_kit::cli::run(std::env::args_os()));
}
