#![allow(dead_code)]

use brainage::engine::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Distinct values with gaps of at least 0.05, in random order.
pub fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05 + rng.random_range(0.0..0.05)).collect();
    v.shuffle(rng);
    v
}

fn lift(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    match *shape {
        [b, c, h, w] => (b, c, [1, h, w]),
        [b, c, d, h, w] => (b, c, [d, h, w]),
        _ => panic!("unsupported rank"),
    }
}

/// Direct-summation convolution with zero padding. Returns values and shape.
pub fn conv_oracle(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (b, cin, ie) = lift(xs);
    let (cout, kcin, ke) = lift(ks);
    assert_eq!(cin, kcin);
    let two_d = xs.len() == 4;
    let (pz, kd) = if two_d { (0, [1, ke[1], ke[2]]) } else { (pad, ke) };
    let pads = [pz, pad, pad];
    let oe: Vec<usize> = (0..3).map(|d| (ie[d] + 2 * pads[d] - kd[d]) / stride + 1).collect();
    let oz_stride = if two_d { 1 } else { stride };
    let strides = [oz_stride, stride, stride];
    let mut out = Vec::new();
    for n in 0..b {
        for o in 0..cout {
            for oz in 0..oe[0] {
                for oy in 0..oe[1] {
                    for ox in 0..oe[2] {
                        let mut s = bias.map_or(0.0, |b| b[o]);
                        for c in 0..cin {
                            for kz in 0..kd[0] {
                                for ky in 0..kd[1] {
                                    for kx in 0..kd[2] {
                                        let z = (oz * strides[0] + kz) as isize - pads[0] as isize;
                                        let y = (oy * strides[1] + ky) as isize - pads[1] as isize;
                                        let xx = (ox * strides[2] + kx) as isize - pads[2] as isize;
                                        if z < 0 || y < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (z, y, xx) = (z as usize, y as usize, xx as usize);
                                        if z >= ie[0] || y >= ie[1] || xx >= ie[2] {
                                            continue;
                                        }
                                        let xi = (((n * cin + c) * ie[0] + z) * ie[1] + y) * ie[2] + xx;
                                        let ki = (((o * cin + c) * kd[0] + kz) * kd[1] + ky) * kd[2] + kx;
                                        s += x[xi] * k[ki];
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
    }
    let mut shape = vec![b, cout];
    if two_d {
        shape.extend(&oe[1..]);
    } else {
        shape.extend(&oe);
    }
    (out, shape)
}

/// Exhaustive window maximum.
pub fn maxpool_oracle(x: &[f64], xs: &[usize], window: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let (b, c, ie) = lift(xs);
    let two_d = xs.len() == 4;
    let w = if two_d { [1, window, window] } else { [window; 3] };
    let s = if two_d { [1, stride, stride] } else { [stride; 3] };
    let oe: Vec<usize> = (0..3).map(|d| (ie[d] - w[d]) / s[d] + 1).collect();
    let mut out = Vec::new();
    for n in 0..b * c {
        for oz in 0..oe[0] {
            for oy in 0..oe[1] {
                for ox in 0..oe[2] {
                    let mut m = f64::NEG_INFINITY;
                    for dz in 0..w[0] {
                        for dy in 0..w[1] {
                            for dx in 0..w[2] {
                                let i = ((n * ie[0] + oz * s[0] + dz) * ie[1] + oy * s[1] + dy) * ie[2] + ox * s[2] + dx;
                                m = m.max(x[i]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    let mut shape = vec![b, c];
    if two_d {
        shape.extend(&oe[1..]);
    } else {
        shape.extend(&oe);
    }
    (out, shape)
}

/// Relative error with an absolute floor for vanishing gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `f` at `x`, compared against `analytic`.
/// Returns the largest relative error.
pub fn max_fd_error(x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// Projection `sum_i c_i * out_i` of a node's value, used as a scalar objective.
pub fn project(g: &Graph<f64>, node: NodeId, c: &[f64]) -> f64 {
    g.value(node).data().iter().zip(c).map(|(a, b)| a * b).sum()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks every leaf gradient of a single-op graph against central differences.
///
/// `build` records the op on a fresh graph from the given leaf values and
/// returns the output node. Leaves are registered as tracked variables.
pub fn check_op(
    leaves: &[(Vec<usize>, Vec<f64>)],
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let run = |vals: &[Vec<f64>]| -> (Graph<f64>, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().zip(vals).map(|((s, _), v)| g.variable(tensor(s, v.clone()))).collect();
        let out = build(&mut g, &ids);
        (g, ids, out)
    };
    let base: Vec<Vec<f64>> = leaves.iter().map(|(_, v)| v.clone()).collect();
    let (g, ids, out) = run(&base);
    let n_out = g.value(out).numel();
    let c = uniform(&mut rng(seed), n_out, -1.0, 1.0);
    let grads = g.backward_seeded(out, c.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for (li, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; base[li].len()]);
        let err = max_fd_error(&base[li], &analytic, 1e-3, |p| {
            let mut vals = base.clone();
            vals[li] = p.to_vec();
            let (g, _, out) = run(&vals);
            project(&g, out, &c)
        });
        worst = worst.max(err);
    }
    worst
}


pub mod cohorts {
    use std::collections::{BTreeMap, BTreeSet};

    use brainage::cohort::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Random manifest over `bins` with every bin occupied. Some subjects
    /// have sessions that spill into the next bin.
    pub fn random_manifest(rng: &mut ChaCha8Rng, bins: &AgeBins) -> Vec<SessionRecord> {
        let mut out = Vec::new();
        let mut next_id = 0;
        for b in 0..bins.len() {
            let (lo, hi) = bins.bounds(b);
            let subjects = rng.random_range(1..10);
            for _ in 0..subjects {
                let subject = format!("sub-{next_id}");
                next_id += 1;
                let gender = if rng.random_bool(0.5) { Gender::M } else { Gender::F };
                let site = ["A", "B", "C"][rng.random_range(0..3)].to_string();
                let sessions = rng.random_range(1..5);
                let mut age = rng.random_range(lo..hi);
                for s in 0..sessions {
                    out.push(SessionRecord {
                        subject_id: subject.clone(),
                        session_id: format!("ses-{}", s + 1),
                        age,
                        gender,
                        site: site.clone(),
                        path: format!("{subject}/ses-{}.vvol", s + 1),
                    });
                    age += rng.random_range(0.0..1.5);
                    if age >= bins.range().1 {
                        break;
                    }
                }
            }
        }
        out
    }

    pub fn random_bins(rng: &mut ChaCha8Rng) -> AgeBins {
        let k = rng.random_range(2..7);
        let mut edges = vec![18.0];
        for _ in 0..k {
            let last = *edges.last().unwrap();
            edges.push(last + rng.random_range(2.0..8.0));
        }
        AgeBins::new(edges).unwrap()
    }

    /// Checks every balancing and splitting invariant; returns a description
    /// of the first violation.
    pub fn check_invariants(records: &[SessionRecord], bins: &AgeBins, seed: u64) -> Result<(), String> {
        let binned = bin_sessions(records, bins);
        if !binned.rejected.is_empty() {
            return Err("generator produced out-of-range ages".into());
        }
        let opts = BalanceOptions { seed, ..Default::default() };
        let cohort = balance_cohort(&binned, &opts).map_err(|e| e.to_string())?;
        let t = cohort.target;
        for (b, group) in cohort.per_bin.iter().enumerate() {
            let sessions = binned.members[b].len();
            if group.len() != t.min(sessions) {
                return Err(format!("bin {b}: {} selected, T={t}, sessions={sessions}", group.len()));
            }
            if !cohort.oversample_bins.contains(&b) {
                let subjects: BTreeSet<&str> = group.iter().map(|r| r.subject_id.as_str()).collect();
                if subjects.len() != group.len() {
                    return Err(format!("bin {b}: repeated subject outside oversample bins"));
                }
            }
        }
        let again_opts = BalanceOptions { target: Some(t), seed, oversample_bins: Some(cohort.oversample_bins.clone()) };
        let again = balance_cohort(&bin_sessions(&cohort.selected(), bins), &again_opts).map_err(|e| e.to_string())?;
        if again.per_bin != cohort.per_bin {
            return Err("balancing is not idempotent".into());
        }

        let ratios = SplitRatios::default();
        let split = stratified_split(&cohort, ratios, seed).map_err(|e| e.to_string())?;
        let mut owner: BTreeMap<&str, SplitName> = BTreeMap::new();
        for (r, s) in &split.assignments {
            if let Some(prev) = owner.insert(&r.subject_id, *s) {
                if prev != *s {
                    return Err(format!("subject {} in {prev} and {s}", r.subject_id));
                }
            }
        }
        let union: Vec<SessionRecord> = split.assignments.iter().map(|(r, _)| r.clone()).collect();
        if union != cohort.selected() {
            return Err("split union differs from the balanced cohort".into());
        }
        for st in &split.strata {
            for i in 0..3 {
                let exact = ratios.0[i] * st.subjects as f64;
                if (st.counts[i] as f64 - exact).abs() >= 1.0 {
                    return Err(format!("stratum {}: counts {:?}", st.key, st.counts));
                }
            }
        }
        let total: usize = split.strata.iter().map(|s| s.subjects).sum();
        if total != owner.len() {
            return Err("strata do not cover every subject exactly once".into());
        }
        Ok(())
    }
}

pub mod stats {
    use brainage::cohort::Gender;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub const PLANTED: [f64; 5] = [12.0, -0.063, -0.17, 2.57e-3, 0.4];

    pub struct Planted {
        pub score: Vec<f64>,
        pub age: Vec<f64>,
        pub age_diff: Vec<f64>,
        pub gender: Vec<Gender>,
    }

    /// `score = b0 + b1 age + b2 d + b3 age d + b4 g + N(0, 1)`.
    pub fn planted(rng: &mut ChaCha8Rng, n: usize) -> Planted {
        let diff = Normal::new(0.0, 5.0).unwrap();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut p = Planted { score: vec![], age: vec![], age_diff: vec![], gender: vec![] };
        for _ in 0..n {
            let a: f64 = rng.random_range(18.0..97.0);
            let d = diff.sample(rng);
            let g = if rng.random_bool(0.5) { Gender::M } else { Gender::F };
            let [b0, b1, b2, b3, b4] = PLANTED;
            p.score.push(b0 + b1 * a + b2 * d + b3 * a * d + b4 * g.indicator() + noise.sample(rng));
            p.age.push(a);
            p.age_diff.push(d);
            p.gender.push(g);
        }
        p
    }

    fn centered(v: &[f64]) -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - m).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Centred `c` with its components along centred `x` and `y` removed.
    pub fn orthogonal_covariate(c: &[f64], x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in [centered(x), centered(y)] {
            let mut v = v;
            for q in &basis {
                let k = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= k * b);
            }
            let n = dot(&v, &v).sqrt();
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
        let mut out = centered(c);
        for _ in 0..2 {
            for q in &basis {
                let k = dot(&out, q);
                out.iter_mut().zip(q).for_each(|(a, b)| *a -= k * b);
            }
        }
        out
    }
}
