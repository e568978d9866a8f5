fn main() {
    let code = pointpwc::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
