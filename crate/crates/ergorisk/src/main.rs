fn main() {
    let code = ergorisk::cli::run(std::env::args_os());
    std::process::exit(code);
}
