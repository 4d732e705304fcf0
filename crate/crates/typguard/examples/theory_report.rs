use typguard::theory::{verify_theory, TheoryConfig};

fn main() {
    let report = verify_theory(&TheoryConfig::default()).expect("theory checks");
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
