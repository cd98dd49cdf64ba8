// SPDX-License-Identifier: Apache-2.0

//! Every experiment end to end on the mock backend.

use std::collections::BTreeSet;
use std::sync::Arc;

use virtine::backend::mock::MockBackend;
use virtine_bench::checks;
use virtine_bench::experiments::{amortization, image_size, ladder, Config, Experiment};
use virtine_bench::measure::{by_variant, experiments, Unit};

const TRIALS: usize = 12;

fn cfg() -> Config {
    Config::new(Arc::new(MockBackend::new()), TRIALS)
}

#[test]
fn every_experiment_runs_on_mock() {
    let cfg = cfg();
    for exp in Experiment::ALL {
        let rows = exp.run(&cfg).unwrap_or_else(|e| panic!("{exp}: {e}"));
        let name = format!("{}-mock", exp.name());
        let exps = experiments(&rows).unwrap();
        assert!(exps.contains(&(name.clone(), Unit::Cycles)), "{exp}: {exps:?}");
        assert!(exps.contains(&(format!("{name}-ns"), Unit::Nanos)), "{exp}");
        for (variant, values) in by_variant(&rows, &name) {
            assert!(!values.is_empty() && values.iter().all(|v| v.is_finite() && *v >= 0.0), "{exp}/{variant}");
        }
    }
}

#[test]
fn ladder_has_every_rung() {
    let rows = Experiment::CreationLadder.run(&cfg()).unwrap();
    let exp = format!("{}-mock", ladder::NAME);
    let variants: BTreeSet<String> = by_variant(&rows, &exp).into_iter().map(|(v, _)| v).collect();
    let expected: BTreeSet<String> = ladder::ORDER.iter().map(|s| s.to_string()).collect();
    assert_eq!(variants, expected);
    for (v, values) in by_variant(&rows, &exp) {
        assert_eq!(values.len(), TRIALS, "{v}");
    }
    assert!(checks::ladder_mock(&rows, &exp).pass);
}

#[test]
fn amortization_covers_each_n() {
    let rows = Experiment::Amortization.run(&cfg()).unwrap();
    let exp = format!("{}-mock", amortization::NAME);
    let ns: BTreeSet<u32> = by_variant(&rows, &exp)
        .iter()
        .filter_map(|(v, _)| amortization::parse_variant(v).map(|(_, n)| n))
        .collect();
    assert_eq!(ns, amortization::DEFAULT_NS.into_iter().collect());
}

#[test]
fn image_size_sweeps_powers_of_two() {
    let rows = Experiment::ImageSize.run(&cfg()).unwrap();
    let exp = format!("{}-mock", image_size::NAME);
    let sizes: Vec<usize> = by_variant(&rows, &exp)
        .iter()
        .filter_map(|(v, _)| image_size::parse_variant(v).filter(|(p, _)| *p == image_size::STARTUP).map(|(_, s)| s))
        .collect();
    assert_eq!(sizes, image_size::default_sizes());
}
