//! The built-in scenarios, their document format and the assumption validator.

use mfbdsde::coefficients::{builtin_scenarios, coefficients_by_name, validate_assumptions, Budget, ScenarioSpec};

fn main() -> mfbdsde::error::Result<()> {
    let budget = Budget::new(2.0, 0.3, 0.2, 16)?;
    for (spec, oracle) in builtin_scenarios() {
        let model = coefficients_by_name(&spec.coefficients).expect("catalog id");
        let report = validate_assumptions(&model, &budget, 200, 1)?;
        println!(
            "{}: x = {:?}, law {}, oracle {:?}, Lipschitz budget {}",
            spec.id,
            spec.x,
            spec.law,
            oracle,
            if report.lipschitz_pass() { "ok" } else { "flagged" }
        );
    }
    let (s1, _) = builtin_scenarios().swap_remove(1);
    let doc = s1.to_document();
    println!("\n{doc}");
    assert_eq!(ScenarioSpec::parse(&doc)?, s1);
    Ok(())
}
