//! Runs every acceptance criterion at its stated tolerance and prints one
//! line per criterion. Failing criteria are reported, not fatal: some are
//! out of reach at desk scale and are expected to fail.

use deltacomb::acceptance::{Options, Suite, CRITERIA};

fn main() {
    let suite = Suite::new(Options::default());
    let mut passed = 0;
    for id in 1..=CRITERIA {
        let r = suite.run(id);
        passed += r.pass as usize;
        println!("{}", r.line());
    }
    println!("acceptance: {passed}/{CRITERIA} criteria pass");
}
