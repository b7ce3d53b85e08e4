fn main() {
    std::process::exit(ktforget::cli::run(std::env::args_os()));
}
