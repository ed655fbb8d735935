fn main() {
    std::process::exit(calidro_cli::run(std::env::args_os()));
}
