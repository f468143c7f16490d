fn main() {
    std::process::exit(msui2i::cli::run(std::env::args_os()));
}
