fn main() {
    std::process::exit(wfio_cli::run(std::env::args_os()));
}
