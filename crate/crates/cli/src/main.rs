fn main() {
    std::process::exit(salcar_cli::run(std::env::args_os()));
}
