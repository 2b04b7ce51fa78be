fn main() {
    std::process::exit(wsseg::cli::run(std::env::args_os()));
}
