fn main() {
    let code = popflow::cli::main_with(std::env::args_os(), std::env::vars(), &mut std::io::stderr());
    std::process::exit(code);
}
