fn main() {
    std::process::exit(ddcrnn::cli::run(std::env::args_os()));
}
