fn main() {
    std::process::exit(ctxlora::cli::run(std::env::args_os()));
}
