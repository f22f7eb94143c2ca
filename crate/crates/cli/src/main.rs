fn main() {
    eprintln!("verticella: not yet wired up");
    std::process::exit(2);
}
