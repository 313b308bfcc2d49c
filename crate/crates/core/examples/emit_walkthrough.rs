//! Prints the built-in walkthrough scenario in its file form.

fn main() {
    print!("{}", gkm_core::simnet::Scenario::walkthrough().to_jsonl());
}
