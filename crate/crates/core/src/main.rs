fn main() {
    let code = tssim::cli::run_cli(std::env::args_os(), &mut std::io::stderr());
    std::process::exit(code);
}
