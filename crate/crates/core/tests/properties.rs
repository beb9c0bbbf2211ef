use mlf_core::data::{sample_windows, window, SeriesDataset, SplitRange, Standardizer};
use mlf_core::gradcheck::{grad_check, GradCheckConfig};
use mlf_core::nn::{param_rng, Init};
use mlf_core::patching::{derive_patch_params, fit_length, patchify};
use mlf_core::{Tape, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64, name: &str) -> Tensor {
    Init::Normal(1.0).sample(shape, &mut param_rng(seed, name))
}

/// Forward-mode reference for scalar expressions.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
    fn tanh(self) -> Dual {
        let t = self.v.tanh();
        Dual {
            v: t,
            d: self.d * (1.0 - t * t),
        }
    }
    fn sigmoid(self) -> Dual {
        let s = 1.0 / (1.0 + (-self.v).exp());
        Dual {
            v: s,
            d: self.d * s * (1.0 - s),
        }
    }
}

/// `u = tanh(x y); out = u u + sigmoid(u) x + u`, reusing `u` three times.
fn shared_dual(x: Dual, y: Dual) -> Dual {
    let u = x.mul(y).tanh();
    u.mul(u).add(u.sigmoid().mul(x)).add(u)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composed_ops_match_finite_differences(
        seed in 0u64..10_000,
        b in 1usize..4,
        n in 1usize..8,
        k in 1usize..8,
        m in 1usize..8,
    ) {
        let point = vec![
            random(&[b, n, k], seed, "a"),
            random(&[b, k, m], seed, "b"),
            random(&[m], seed, "bias"),
            random(&[b, n, m], seed, "w"),
        ];
        let rep = grad_check(
            |tape, xs| {
                let p = tape.matmul(xs[0], xs[1])?;
                let p = tape.add_broadcast(p, xs[2])?;
                let s = tape.softmax(p, 2)?;
                let t = tape.tanh(p)?;
                let q = tape.mul(s, xs[3])?;
                let q = tape.add(q, t)?;
                let perm = tape.permute(q, &[0, 2, 1])?;
                let sg = tape.sigmoid(perm)?;
                let back = tape.permute(sg, &[0, 2, 1])?;
                let z = tape.constant(Tensor::zeros(&[b, n, m]));
                let l = tape.mse(back, z)?;
                let r = tape.mean(q)?;
                tape.add(l, r)
            },
            &point,
            &GradCheckConfig::default(),
        ).unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
    }

    #[test]
    fn shared_subexpressions_match_forward_mode(x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::scalar(x));
        let yv = tape.leaf(Tensor::scalar(y));
        let xy = tape.mul(xv, yv).unwrap();
        let u = tape.tanh(xy).unwrap();
        let uu = tape.mul(u, u).unwrap();
        let su = tape.sigmoid(u).unwrap();
        let sx = tape.mul(su, xv).unwrap();
        let s = tape.add(uu, sx).unwrap();
        let out = tape.add(s, u).unwrap();
        tape.backward(out).unwrap();
        let dx = shared_dual(Dual { v: x, d: 1.0 }, Dual { v: y, d: 0.0 });
        let dy = shared_dual(Dual { v: x, d: 0.0 }, Dual { v: y, d: 1.0 });
        prop_assert!((tape.value(out).item() - dx.v).abs() < 1e-12);
        prop_assert!((tape.grad(xv).unwrap()[0] - dx.d).abs() < 1e-12);
        prop_assert!((tape.grad(yv).unwrap()[0] - dy.d).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_lie_on_the_simplex(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let x = random(&[rows, cols], seed, "x");
        let x = Tensor::new(&[rows, cols], x.data().iter().map(|v| v * scale).collect()).unwrap();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn adaptive_patching_always_yields_target_count(n in 1usize..3000, target in 1usize..80, alpha in 1usize..4) {
        prop_assume!(target + alpha > 2);
        let p = derive_patch_params(0, n, target, alpha);
        let w: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let fitted = fit_length(&w, p.fitted_len);
        let patches = patchify(&fitted, p.patch_len, p.stride).unwrap();
        prop_assert_eq!(patches.shape()[0], target);
        prop_assert_eq!(patches.shape()[1], alpha * p.stride);
        // the newest value always reaches the last patch
        prop_assert_eq!(*patches.data().last().unwrap(), (n - 1) as f64);
    }

    #[test]
    fn windows_are_suffixes_of_the_longest(
        seed in 0u64..10_000,
        t in 20usize..80,
        c in 1usize..3,
        p1 in 1usize..5,
        gap in 1usize..8,
        m in 1usize..5,
    ) {
        let values = random(&[t * c], seed, "series").into_data();
        let names = (0..c).map(|i| format!("c{i}")).collect();
        let ds = SeriesDataset::new(names, values).unwrap();
        let periods = [p1, p1 + gap, p1 + 2 * gap];
        let split = SplitRange { start: 0, end: t, history_start: 0 };
        let idx = sample_windows(&ds, &split, &periods, m);
        let longest = periods[2];
        let expected = if t >= longest + m { (t - m - longest + 1) * c } else { 0 };
        prop_assert_eq!(idx.len(), expected);
        for i in idx {
            let w = window(&ds, i, &periods, m).unwrap();
            for s in 0..3 {
                let long = &w.windows[2];
                prop_assert_eq!(&w.windows[s][..], &long[long.len() - periods[s]..]);
            }
            prop_assert!(i.anchor + m <= t);
        }
    }

    #[test]
    fn standardize_round_trip(seed in 0u64..10_000, t in 4usize..40, c in 1usize..4, shift in -100.0f64..100.0) {
        let values: Vec<f64> = random(&[t * c], seed, "v").data().iter().map(|v| v + shift).collect();
        let names = (0..c).map(|i| format!("c{i}")).collect();
        let ds = SeriesDataset::new(names, values).unwrap();
        let st = Standardizer::fit(&ds, 0..t / 2 + 2).unwrap();
        let back = st.inverse(&st.transform(&ds).unwrap()).unwrap();
        for (a, b) in back.values().iter().zip(ds.values()) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }
}
