fn main() {
    std::process::exit(migdial_cli::main_with_std());
}
