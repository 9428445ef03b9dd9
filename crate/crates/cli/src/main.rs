fn main() {
    std::process::exit(volprop_cli::main_with(std::env::args_os()));
}
