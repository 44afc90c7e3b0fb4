fn main() {
    std::process::exit(rapnet_cli::run(std::env::args_os()));
}
