//! Command-line interface. Placeholder that grows with the modules.

pub fn run() -> i32 {
    eprintln!("not yet wired");
    1
}
