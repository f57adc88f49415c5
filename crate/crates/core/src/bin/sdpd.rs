fn main() {
    std::process::exit(sdpd::cli::run(std::env::args_os()));
}
