fn main() {
    std::process::exit(kinver::cli::main_entry());
}
