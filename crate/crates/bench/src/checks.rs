// SPDX-License-Identifier: Apache-2.0

//! Expected orderings and ratios, evaluated on summaries of the cycle series.
//!
//! Absolute values are machine-specific; every check here is relative.

use std::fmt;

use crate::experiments::{amortization, boot, http, image_size, ladder};
use crate::measure::{self, Measurement};
use crate::stats::{linear_fit, summarize, SummaryRow};

/// Cached-async acquire against a bare run-resume.
pub const ASYNC_OVER_BARE_MAX: f64 = 1.5;
/// Fresh create against a cached acquire.
pub const FRESH_OVER_CACHED_MIN: f64 = 5.0;
/// Largest over smallest image start-up.
pub const SIZE_RANGE_MIN: f64 = 10.0;
/// Implied copy bandwidth may differ from the measured one by this factor.
pub const BANDWIDTH_FACTOR: f64 = 2.0;
/// Linearity of start-up against size over the upper half of the sweep.
pub const LINEAR_R2_MIN: f64 = 0.98;
/// Snapshot slowdown bound once native work reaches [`AMORTIZED_NATIVE_NS`].
pub const AMORTIZED_SLOWDOWN_MAX: f64 = 1.2;
pub const AMORTIZED_NATIVE_NS: f64 = 100_000.0;
pub const SNAPSHOT_SPEEDUP_MIN: f64 = 1.5;
pub const HTTP_THROUGHPUT_MIN: f64 = 0.7;
pub const HTTP_HYPERCALLS: f64 = 7.0;
/// Component sum against the end-to-end boot total.
pub const BOOT_SUM_TOLERANCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

/// Summaries of every variant of `experiment`, in recording order.
pub fn summaries(rows: &[Measurement], experiment: &str) -> Vec<SummaryRow> {
    measure::by_variant(rows, experiment)
        .into_iter()
        .filter_map(|(v, vals)| summarize(&v, &vals))
        .collect()
}

fn median(rows: &[SummaryRow], variant: &str) -> Option<f64> {
    rows.iter().find(|r| r.variant == variant).map(|r| r.median)
}

fn missing(name: &str, what: &str) -> Check {
    Check::new(name, false, format!("no samples for {what}"))
}

/// `function < bare ≤ cached-async ≤ cached < thread < fresh < process`.
pub fn ladder(rows: &[Measurement], experiment: &str) -> Vec<Check> {
    let s = summaries(rows, experiment);
    let m = |v| median(&s, v);
    let mut out = Vec::new();
    use ladder::*;
    let all: Option<Vec<f64>> = ORDER.iter().map(|v| m(v)).collect();
    match all {
        None => out.push(missing("ladder ordering", "some ladder variant")),
        Some(meds) => {
            let [f, bare, ca, c, th, fresh, fork, spawn] = meds[..] else {
                unreachable!("ORDER has eight entries")
            };
            let chain = [
                (FUNCTION, BARE_RUN, f < bare),
                (BARE_RUN, CACHED_ASYNC, bare <= ca),
                (CACHED_ASYNC, CACHED, ca <= c),
                (CACHED, THREAD, c < th),
                (THREAD, FRESH, th < fresh),
                (FRESH, FORK, fresh < fork),
                (FRESH, SPAWN, fresh < spawn),
            ];
            let broken: Vec<String> = chain
                .iter()
                .filter(|(_, _, ok)| !ok)
                .map(|(a, b, _)| format!("{a} !< {b}"))
                .collect();
            let listing: Vec<String> = ORDER.iter().zip(&meds).map(|(v, m)| format!("{v}={m:.0}")).collect();
            out.push(Check::new(
                "ladder ordering",
                broken.is_empty(),
                if broken.is_empty() {
                    listing.join(" ")
                } else {
                    format!("{} ({})", broken.join(", "), listing.join(" "))
                },
            ));
        }
    }
    match (m(CACHED_ASYNC), m(BARE_RUN)) {
        (Some(ca), Some(bare)) => out.push(Check::new(
            "cached-async / bare run-resume",
            ca / bare <= ASYNC_OVER_BARE_MAX,
            format!("{:.2} (limit {ASYNC_OVER_BARE_MAX})", ca / bare),
        )),
        _ => out.push(missing("cached-async / bare run-resume", "cached-async or bare")),
    }
    match (m(FRESH), m(CACHED)) {
        (Some(fresh), Some(c)) => out.push(Check::new(
            "fresh / cached",
            fresh / c >= FRESH_OVER_CACHED_MIN,
            format!("{:.1}x (minimum {FRESH_OVER_CACHED_MIN}x)", fresh / c),
        )),
        _ => out.push(missing("fresh / cached", "fresh or cached")),
    }
    out
}

/// Just the structural mock-backend property: a pooled shell beats a new one.
pub fn ladder_mock(rows: &[Measurement], experiment: &str) -> Check {
    let s = summaries(rows, experiment);
    match (median(&s, ladder::CACHED), median(&s, ladder::FRESH)) {
        (Some(c), Some(f)) => Check::new("mock cached < fresh", c < f, format!("cached={c:.0} fresh={f:.0}")),
        _ => missing("mock cached < fresh", "cached or fresh"),
    }
}

/// `(bytes, median)` for every variant with `prefix`, ascending by size.
pub fn size_series(s: &[SummaryRow], prefix: &str) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = s
        .iter()
        .filter_map(|r| {
            let (p, n) = image_size::parse_variant(&r.variant)?;
            (p == prefix).then_some((n as f64, r.median))
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// Bytes per cycle of the slope over the upper half of `pts`, and its r².
fn upper_slope(pts: &[(f64, f64)]) -> (f64, f64) {
    let upper = &pts[pts.len() / 2..];
    let (slope, _, r2) = linear_fit(upper);
    (1.0 / slope, r2)
}

pub fn image_size(rows: &[Measurement], experiment: &str) -> Vec<Check> {
    let s = summaries(rows, experiment);
    let startup = size_series(&s, image_size::STARTUP);
    let restore = size_series(&s, image_size::RESTORE);
    let memcpy = size_series(&s, image_size::MEMCPY);
    let mut out = Vec::new();
    if startup.len() < 4 || memcpy.is_empty() {
        out.push(missing("image-size sweep", "start-up sizes or memcpy"));
        return out;
    }
    let drops: Vec<String> = startup
        .windows(2)
        .filter(|w| w[1].1 < w[0].1)
        .map(|w| format!("{}B {:.0} > {}B {:.0}", w[0].0, w[0].1, w[1].0, w[1].1))
        .collect();
    out.push(Check::new(
        "start-up monotone in image size",
        drops.is_empty(),
        if drops.is_empty() {
            format!("{} sizes", startup.len())
        } else {
            drops.join("; ")
        },
    ));
    let (first, last) = (startup[0], startup[startup.len() - 1]);
    out.push(Check::new(
        "largest / smallest start-up",
        last.1 / first.1 >= SIZE_RANGE_MIN,
        format!("{:.1}x (minimum {SIZE_RANGE_MIN}x)", last.1 / first.1),
    ));
    let (bytes, cyc) = memcpy[memcpy.len() - 1];
    let copy_bw = bytes / cyc;
    let (implied, r2) = upper_slope(&startup);
    out.push(Check::new(
        "start-up asymptotically linear",
        r2 >= LINEAR_R2_MIN,
        format!("r²={r2:.4} over the upper half (minimum {LINEAR_R2_MIN})"),
    ));
    let ratio = implied / copy_bw;
    out.push(Check::new(
        "implied bandwidth vs memcpy",
        (1.0 / BANDWIDTH_FACTOR..=BANDWIDTH_FACTOR).contains(&ratio),
        format!("implied {implied:.2} B/cycle, memcpy {copy_bw:.2} B/cycle, ratio {ratio:.2}"),
    ));
    if restore.len() >= 4 {
        let (implied, r2) = upper_slope(&restore);
        let ratio = implied / copy_bw;
        out.push(Check::new(
            "restore bandwidth vs memcpy",
            (1.0 / BANDWIDTH_FACTOR..=BANDWIDTH_FACTOR).contains(&ratio) && r2 >= LINEAR_R2_MIN,
            format!("implied {implied:.2} B/cycle, ratio {ratio:.2}, r²={r2:.4}"),
        ));
    }
    out
}

pub fn modes(rows: &[Measurement], experiment: &str) -> Vec<Check> {
    use virtine::platform::ProcessorMode::*;
    let s = summaries(rows, experiment);
    let meds: Option<Vec<f64>> = [Real16, Protected32, Long64].iter().map(|m| median(&s, m.name())).collect();
    let Some(meds) = meds else {
        return vec![missing("mode ordering", "a mode")];
    };
    let detail = format!("real={:.0} protected={:.0} long={:.0}", meds[0], meds[1], meds[2]);
    vec![Check::new("mode ordering", meds[0] <= meds[1] && meds[1] <= meds[2], detail)]
}

pub fn amortization(rows: &[Measurement], experiment: &str, timer_cycles_per_ns: f64) -> Vec<Check> {
    use amortization::*;
    let s = summaries(rows, experiment);
    let mut ns: Vec<u32> = s
        .iter()
        .filter_map(|r| parse_variant(&r.variant).filter(|(k, _)| *k == NATIVE).map(|(_, n)| n))
        .collect();
    ns.sort_unstable();
    let get = |kind, n| median(&s, &variant(kind, n));
    let mut out = Vec::new();
    let slow: Vec<(u32, f64, f64)> = ns
        .iter()
        .filter_map(|&n| Some((n, get(SNAPSHOT, n)? / get(NATIVE, n)?, get(NATIVE, n)?)))
        .collect();
    if slow.is_empty() {
        return vec![missing("amortization", "native and snapshot pairs")];
    }
    let listing: Vec<String> = slow.iter().map(|(n, r, _)| format!("n={n}:{r:.2}")).collect();
    out.push(Check::new(
        "snapshot slowdown non-increasing",
        slow.windows(2).all(|w| w[1].1 <= w[0].1),
        listing.join(" "),
    ));
    let amortized: Vec<&(u32, f64, f64)> = slow
        .iter()
        .filter(|(_, _, native)| native / timer_cycles_per_ns >= AMORTIZED_NATIVE_NS)
        .collect();
    out.push(match amortized.as_slice() {
        [] => missing("amortized slowdown", "n with native time of 100µs or more"),
        a => Check::new(
            "amortized slowdown",
            a.iter().all(|(_, r, _)| *r <= AMORTIZED_SLOWDOWN_MAX),
            format!("worst {:.2} (limit {AMORTIZED_SLOWDOWN_MAX})", a.iter().map(|x| x.1).fold(0.0, f64::max)),
        ),
    });
    out.push(match (get(VIRTINE, 0), get(SNAPSHOT, 0)) {
        (Some(v), Some(sn)) => Check::new(
            "snapshot speedup at n=0",
            v / sn >= SNAPSHOT_SPEEDUP_MIN,
            format!("{:.2}x (minimum {SNAPSHOT_SPEEDUP_MIN}x)", v / sn),
        ),
        _ => missing("snapshot speedup at n=0", "n=0"),
    });
    out
}

pub fn boot(rows: &[Measurement], experiment: &str) -> Vec<Check> {
    use virtine::hypercall::milestone;
    let s = summaries(rows, experiment);
    let parts: Vec<(&str, f64)> = boot::COMPONENTS
        .iter()
        .filter(|&&id| id != milestone::ENTRY_C)
        .filter_map(|&id| Some((milestone::name(id), median(&s, milestone::name(id))?)))
        .collect();
    if parts.is_empty() {
        return vec![missing("boot breakdown", "boot milestones")];
    }
    let max = parts.iter().copied().fold(("", f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let min = parts.iter().copied().fold(("", f64::MAX), |a, b| if b.1 < a.1 { b } else { a });
    let mut out = vec![
        Check::new(
            "identity map is the largest component",
            max.0 == milestone::name(milestone::IDENTITY_MAP),
            format!("largest {} ({:.0})", max.0, max.1),
        ),
        Check::new(
            "first instruction is the smallest component",
            min.0 == milestone::name(milestone::FIRST_INSTRUCTION),
            format!("smallest {} ({:.0})", min.0, min.1),
        ),
    ];
    // Means add up; medians need not.
    let mean = |v: &str| s.iter().find(|r| r.variant == v).map(|r| r.mean);
    let sum: f64 = boot::COMPONENTS.iter().filter_map(|&id| mean(milestone::name(id))).sum();
    if let Some(total) = mean(boot::TOTAL) {
        let err = (total - sum).abs() / total;
        out.push(Check::new(
            "components sum to the end-to-end time",
            err <= BOOT_SUM_TOLERANCE,
            format!("sum {sum:.0} vs total {total:.0} ({:.0}% off)", err * 100.0),
        ));
    }
    out
}

pub fn http(rows: &[Measurement], experiment: &str) -> Vec<Check> {
    use http::*;
    let mut out = Vec::new();
    // Harmonic mean of the per-batch throughput.
    let hmean = |v: &str| {
        let vals: Vec<f64> = measure::by_variant(rows, &format!("{experiment}-{THROUGHPUT}"))
            .into_iter()
            .find(|(name, _)| name == v)?
            .1;
        Some(vals.len() as f64 / vals.iter().map(|x| 1.0 / x).sum::<f64>())
    };
    out.push(match (hmean(NATIVE), hmean(SNAPSHOT)) {
        (Some(n), Some(s)) => Check::new(
            "snapshot throughput vs native",
            s / n >= HTTP_THROUGHPUT_MIN,
            format!("{:.0}% of native (minimum {:.0}%)", 100.0 * s / n, 100.0 * HTTP_THROUGHPUT_MIN),
        ),
        _ => missing("snapshot throughput vs native", "throughput"),
    });
    let lat = summaries(rows, experiment);
    if let (Some(n), Some(s), Some(v)) = (median(&lat, NATIVE), median(&lat, SNAPSHOT), median(&lat, VIRTINE)) {
        out.push(Check::new(
            "latency native <= snapshot <= virtine",
            n <= s && s <= v,
            format!("native={n:.0} snapshot={s:.0} virtine={v:.0}"),
        ));
    }
    let calls = measure::by_variant(rows, &format!("{experiment}-{HYPERCALLS}"));
    if !calls.is_empty() {
        let bad: usize = calls.iter().map(|(_, v)| v.iter().filter(|&&c| c != HTTP_HYPERCALLS).count()).sum();
        let total: usize = calls.iter().map(|(_, v)| v.len()).sum();
        out.push(Check::new(
            "seven hypercalls per request",
            bad == 0,
            format!("{bad} of {total} requests differ"),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Recorder;
    use crate::timer::Timer;

    fn rec(exp: &str) -> Recorder {
        Recorder::new(
            exp,
            Timer {
                cycles_per_ns: 1.0,
                overhead: 0,
                pinned: false,
            },
        )
    }

    #[test]
    fn ladder_in_order_passes() {
        let mut r = rec("l");
        for (i, v) in ladder::ORDER.iter().enumerate() {
            let base = [1, 100, 110, 400, 5000, 20000, 90000, 95000][i];
            for k in 0..20 {
                r.cycles(v, base + k);
            }
        }
        let checks = ladder(&r.into_measurements(), "l");
        assert!(checks.iter().all(|c| c.pass), "{checks:#?}");
    }

    #[test]
    fn ladder_out_of_order_fails() {
        let mut r = rec("l");
        for (i, v) in ladder::ORDER.iter().enumerate() {
            r.cycles(v, [1, 100, 300, 200, 5000, 6000, 9e4 as u64, 9e4 as u64][i]);
        }
        let checks = ladder(&r.into_measurements(), "l");
        assert!(!checks[0].pass && checks[0].detail.contains("cached-async !< cached"));
        assert!(!checks[1].pass, "300/100 is over the limit");
        assert!(checks[2].pass, "6000/200 = 30x");
    }

    #[test]
    fn linear_sizes_pass() {
        let mut r = rec("s");
        for s in image_size::default_sizes() {
            // 1000 cycles fixed plus 2 bytes per cycle.
            r.cycles(&image_size::variant(image_size::STARTUP, s), 1000 + s as u64 / 2);
        }
        r.cycles(&image_size::variant(image_size::MEMCPY, 16 << 20), 8 << 20);
        let checks = image_size(&r.into_measurements(), "s");
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| c.pass), "{checks:#?}");
    }

    #[test]
    fn flat_sizes_fail() {
        let mut r = rec("s");
        for s in image_size::default_sizes() {
            r.cycles(&image_size::variant(image_size::STARTUP, s), 1000);
        }
        r.cycles(&image_size::variant(image_size::MEMCPY, 16 << 20), 8 << 20);
        let checks = image_size(&r.into_measurements(), "s");
        assert!(!checks[1].pass);
    }
}
