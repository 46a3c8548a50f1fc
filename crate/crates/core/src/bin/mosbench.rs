fn main() {
    std::process::exit(mosbench::cli::main_entry(std::env::args()));
}
