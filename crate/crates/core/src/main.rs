fn main() {
    std::process::exit(ddcl::cli::main_with_args(std::env::args_os()));
}
