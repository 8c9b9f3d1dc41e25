fn main() {
    std::process::exit(dpcox_cli::run(std::env::args_os()));
}
