fn main() {
    std::process::exit(fairlayer_cli::run(std::env::args_os()));
}
