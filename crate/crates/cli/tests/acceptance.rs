//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion; pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use stereovae::autodiff::Tape;
use stereovae::distributions::{
    kl_mc, log_prob, mean_and_standard_error, LatentPrior,
};
use stereovae::geometry::{
    arc_distance, geodesic, gyro_distance, karcher_mean, mobius_add, ops, stereo_lift, Curvature, ManifoldPoint,
};
use stereovae::gyroplane::{
    feature_raw, gyroplane_backward, hyperplane_distance, GyroHyperplane, GyroplaneLayer,
};
use stereovae::harness::{gen_synthetic, interpolate_pair, InterpolationMode, SyntheticSpec};
use stereovae::nn::{bernoulli_nll, LayerSpec, Likelihood, Mode, Network, ParamStore, Tensor};
use stereovae::rng::SeededRng;
use stereovae::spvae::{latent_draw, SpVaeConfig, SpVaeModel};
use stereovae::svdd::{SvddConfig, SvddModel};
use stereovae_cli::{cmd_score, cmd_svdd, cmd_train_vae, Overrides, Task};

type Check = Result<String, String>;

const REGIMES: [f64; 4] = [-1.0, -0.1, 0.1, 1.0];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn curv(k: f64) -> Curvature {
    Curvature::new(k).unwrap()
}

/// Uniform direction, tangent radius with `√|k|·‖v‖ ≤ reach`, mapped
/// through `exp0`.
fn random_point(k: f64, d: usize, reach: f64, rng: &mut SeededRng) -> ManifoldPoint {
    let dir = rng.normals(d);
    let n = ops::norm(&dir);
    let scale = if k == 0.0 { 1.0 } else { 1.0 / k.abs().sqrt() };
    let r = reach * scale * rng.uniform().powf(1.0 / d as f64);
    let v: Vec<f64> = dir.iter().map(|x| x / n * r).collect();
    ManifoldPoint::new(curv(k), ops::project(k, &ops::exp0(k, &v))).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

// 1 -------------------------------------------------------------------------

fn gyrogroup_identities() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &k in &REGIMES {
        for d in [2, 6] {
            let mut rng = SeededRng::new(100 + d as u64).substream((k * 10.0) as i64 as u64);
            let origin = ManifoldPoint::origin(curv(k), d);
            let reach = if k > 0.0 { 0.6 } else { 1.5 };
            for _ in 0..10_000 {
                let x = random_point(k, d, reach, &mut rng);
                let y = random_point(k, d, reach, &mut rng);
                let xy = mobius_add(&x, &y).map_err(|e| e.to_string())?;
                let cancel = mobius_add(&x.negated(), &xy).map_err(|e| e.to_string())?;
                let left_id = mobius_add(&origin, &x).map_err(|e| e.to_string())?;
                let right_id = mobius_add(&x, &origin).map_err(|e| e.to_string())?;
                let inverse = mobius_add(&x.negated(), &x).map_err(|e| e.to_string())?;
                let errs = [
                    max_abs_diff(cancel.coords(), y.coords()),
                    max_abs_diff(left_id.coords(), x.coords()),
                    max_abs_diff(right_id.coords(), x.coords()),
                    max_abs_diff(inverse.coords(), origin.coords()),
                ];
                for e in errs {
                    worst = worst.max(e);
                }
                ensure(errs.iter().all(|&e| e <= 1e-12), || {
                    format!("k={k} d={d}: errors {errs:?} at x={:?} y={:?}", x.coords(), y.coords())
                })?;
            }
        }
    }
    within(start.elapsed(), 10, "identity suite")?;
    Ok(format!("max error {worst:.2e} over 8×10⁴ pairs"))
}

// 2 -------------------------------------------------------------------------

/// Geodesic distance on the sphere or hyperboloid of radius `1/√|k|` from
/// the ambient chord.
fn ambient_distance(k: f64, x: &ManifoldPoint, y: &ManifoldPoint) -> f64 {
    let (a, b) = (stereo_lift(x).unwrap(), stereo_lift(y).unwrap());
    let r = 1.0 / k.abs().sqrt();
    let dxi = a.xi() - b.xi();
    let dx2: f64 = a.x().iter().zip(b.x()).map(|(p, q)| (p - q).powi(2)).sum();
    if k > 0.0 {
        let c = (dxi * dxi + dx2).sqrt();
        2.0 * r * (c / (2.0 * r)).min(1.0).asin()
    } else {
        let c = (dx2 - dxi * dxi).max(0.0).sqrt();
        2.0 * r * (c / (2.0 * r)).asinh()
    }
}

fn isometry() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &k in &REGIMES {
        for d in [2, 6] {
            let mut rng = SeededRng::new(200 + d as u64).substream((k * 10.0) as i64 as u64);
            for _ in 0..10_000 {
                let x = random_point(k, d, 1.2, &mut rng);
                let y = random_point(k, d, 1.2, &mut rng);
                let g = gyro_distance(&x, &y).map_err(|e| e.to_string())?;
                let a = ambient_distance(k, &x, &y);
                let e = (g - a).abs();
                worst = worst.max(e);
                ensure(e <= 1e-8, || format!("k={k} d={d}: gyro {g} vs ambient {a}"))?;
            }
        }
    }
    within(start.elapsed(), 10, "isometry")?;
    Ok(format!("max |Δd| {worst:.2e}"))
}

// 3 -------------------------------------------------------------------------

fn distance_forms() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &k in &REGIMES {
        for d in [2, 6] {
            let mut rng = SeededRng::new(300 + d as u64).substream((k * 10.0) as i64 as u64);
            for _ in 0..10_000 {
                let x = random_point(k, d, 1.2, &mut rng);
                let y = random_point(k, d, 1.2, &mut rng);
                let g = gyro_distance(&x, &y).map_err(|e| e.to_string())?;
                let a = arc_distance(&x, &y).map_err(|e| e.to_string())?;
                worst = worst.max((g - a).abs());
                ensure((g - a).abs() <= 1e-9, || format!("k={k} d={d}: gyro {g} vs arc {a}"))?;
            }
        }
    }
    within(start.elapsed(), 5, "distance forms")?;
    Ok(format!("max |Δd| {worst:.2e}"))
}

// 4 -------------------------------------------------------------------------

/// Minimum of `f` over a uniform grid on `[lo, hi]`, refined by golden
/// section inside the best cell.
fn grid_then_golden(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let (mut best, mut best_v) = (lo, f64::INFINITY);
    for i in 0..n {
        let s = lo + h * i as f64;
        let v = f(s);
        if v < best_v {
            best = s;
            best_v = v;
        }
    }
    let (mut a, mut b) = ((best - h).max(lo), (best + h).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    best_v.min(fc).min(fd)
}

fn hyperplane_oracle() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &k in &REGIMES {
        let mut rng = SeededRng::new(400).substream((k * 10.0) as i64 as u64);
        let reach = if k > 0.0 { 0.6 } else { 1.2 };
        for _ in 0..100 {
            let p = random_point(k, 2, reach, &mut rng);
            let z = random_point(k, 2, reach, &mut rng);
            let a = rng.normals(2);
            let na = ops::norm(&a);
            let u = [-a[1] / na, a[0] / na];
            let on_plane = |t: f64| ops::mobius_add(k, p.coords(), &[t * u[0], t * u[1]]);
            let dist = |t: f64| ops::distance(k, z.coords(), &on_plane(t));
            let brute = if k > 0.0 {
                let half = std::f64::consts::FRAC_PI_2 * (1.0 - 1e-9);
                grid_then_golden(|th| dist(th.tan() / k.sqrt()), -half, half, 20_001)
            } else {
                let r = 1.0 / (-k).sqrt();
                grid_then_golden(|s| dist(r * s.tanh()), -12.0, 12.0, 20_001)
            };
            let h = GyroHyperplane::new(p.clone(), a.clone()).map_err(|e| e.to_string())?;
            let closed = hyperplane_distance(&z, &h).map_err(|e| e.to_string())?;
            let e = (brute - closed).abs();
            worst = worst.max(e);
            ensure(e <= 1e-4, || {
                format!("k={k}: closed form {closed} vs brute force {brute} (p={:?} a={a:?} z={:?})", p.coords(), z.coords())
            })?;
        }
    }
    within(start.elapsed(), 60, "hyperplane oracle")?;
    Ok(format!("max |Δd| {worst:.2e} over 400 configurations"))
}

// 5 -------------------------------------------------------------------------

const FD_H: f64 = 1e-5;

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_H) - f(x - FD_H)) / (2.0 * FD_H)
}

fn gyroplane_gradients(worst: &mut f64) -> Result<(), String> {
    let mut rng = SeededRng::new(501);
    for case in 0..100 {
        let k = REGIMES[case % 4];
        let d = 2 + case % 3;
        let m = 3;
        let reach = if k > 0.0 { 0.6 } else { 1.2 };
        let z = random_point(k, d, reach, &mut rng);
        let mut hs = Vec::new();
        for _ in 0..m {
            hs.push(GyroHyperplane::new(random_point(k, d, reach, &mut rng), rng.normals(d)).unwrap());
        }
        let layer = GyroplaneLayer::new(curv(k), hs.clone()).map_err(|e| e.to_string())?;
        let up = rng.normals(m);
        let g = gyroplane_backward(&z, &layer, &up).map_err(|e| e.to_string())?;
        let total = |zc: &[f64], ps: &[Vec<f64>], as_: &[Vec<f64>]| -> f64 {
            (0..m).map(|j| up[j] * feature_raw(k, zc, &ps[j], &as_[j])).sum()
        };
        let ps: Vec<Vec<f64>> = hs.iter().map(|h| h.offset().coords().to_vec()).collect();
        let as_: Vec<Vec<f64>> = hs.iter().map(|h| h.normal().to_vec()).collect();
        for i in 0..d {
            let mut f = |v: f64| {
                let mut zc = z.coords().to_vec();
                zc[i] = v;
                total(&zc, &ps, &as_)
            };
            let e = rel_err(g.z[i], central(&mut f, z.coords()[i]));
            *worst = worst.max(e);
            ensure(e <= 1e-5, || format!("gyroplane dz[{i}] case {case}: rel {e:.2e}"))?;
            for j in 0..m {
                let mut fp = |v: f64| {
                    let mut q = ps.clone();
                    q[j][i] = v;
                    total(z.coords(), &q, &as_)
                };
                let e = rel_err(g.p[j][i], central(&mut fp, ps[j][i]));
                *worst = worst.max(e);
                ensure(e <= 1e-5, || format!("gyroplane dp[{j}][{i}] case {case}: rel {e:.2e}"))?;
                let mut fa = |v: f64| {
                    let mut q = as_.clone();
                    q[j][i] = v;
                    total(z.coords(), &ps, &q)
                };
                let e = rel_err(g.a[j][i], central(&mut fa, as_[j][i]));
                *worst = worst.max(e);
                ensure(e <= 1e-5, || format!("gyroplane da[{j}][{i}] case {case}: rel {e:.2e}"))?;
            }
        }
    }
    Ok(())
}

fn sampling_path_gradients(worst: &mut f64) -> Result<(), String> {
    let mut rng = SeededRng::new(502);
    for case in 0..100 {
        let k = [-1.0, -0.1, 0.0, 0.1, 1.0][case % 5];
        let d = 2 + case % 5;
        let head: Vec<f64> = (0..2 * d)
            .map(|i| if i < d { 0.5 * rng.normal() } else { rng.range(-1.5, 0.5) })
            .collect();
        let eps = rng.normals(d);
        let cz = rng.normals(d);
        let ckl = rng.normal();
        let value = |h: &[f64]| {
            let dr = latent_draw(k, h, &eps, 1.0);
            dr.z.iter().zip(&cz).map(|(z, c)| z * c).sum::<f64>() + ckl * dr.kl
        };
        let tape = Tape::new();
        let vars = tape.vars(&head);
        let dr = latent_draw(k, &vars, &eps, 1.0);
        let mut out = dr.kl * ckl;
        for (z, c) in dr.z.iter().zip(&cz) {
            out = out + *z * *c;
        }
        let adj = tape.gradient(out);
        for i in 0..2 * d {
            let mut f = |v: f64| {
                let mut h = head.clone();
                h[i] = v;
                value(&h)
            };
            let e = rel_err(adj[vars[i].index()], central(&mut f, head[i]));
            *worst = worst.max(e);
            ensure(e <= 1e-4, || format!("sampling path k={k} d={d} head[{i}]: rel {e:.2e}"))?;
        }
    }
    Ok(())
}

fn random_tensor(shape: Vec<usize>, rng: &mut SeededRng, away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal();
            if away_from_zero && v.abs() < 0.1 {
                v.signum() * 0.1 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks input and parameter gradients of one layer against central
/// differences of `Σ r ⊙ f(x)`, on up to 16 coordinates of each tensor.
fn check_layer(spec: LayerSpec, in_shape: &[usize], batch: usize, away: bool, case: usize, rng: &mut SeededRng) -> Result<f64, String> {
    let name = spec.name();
    let mut store = ParamStore::new();
    let net = Network::build("net", in_shape, vec![spec], &mut store, rng).map_err(|e| e.to_string())?;
    for id in net.param_ids() {
        let p = store.get_mut(id);
        if p.trainable() {
            let n = p.value.len();
            p.value = rng.normals(n).iter().map(|v| 0.5 * v).collect();
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(in_shape);
    let x = random_tensor(shape, rng, away);
    let (y, mut tape) = net.forward(&mut store, &x, Mode::Train).map_err(|e| e.to_string())?;
    let r = random_tensor(y.shape().to_vec(), rng, false);
    let mut grads = store.zero_grads();
    let gx = net.backward(&store, &mut tape, &r, &mut grads).map_err(|e| e.to_string())?;
    let objective = |store: &mut ParamStore, x: &Tensor| -> f64 {
        let (y, _) = net.forward(store, x, Mode::Train).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    let pick = |n: usize, rng: &mut SeededRng| -> Vec<usize> {
        if n <= 16 {
            (0..n).collect()
        } else {
            (0..16).map(|_| rng.below(n)).collect()
        }
    };
    for i in pick(x.len(), rng) {
        let mut f = |v: f64| {
            let mut xx = x.clone();
            xx.data_mut()[i] = v;
            objective(&mut store, &xx)
        };
        let e = rel_err(gx.data()[i], central(&mut f, x.data()[i]));
        worst = worst.max(e);
        ensure(e <= 1e-5, || format!("{name} case {case} dx[{i}]: rel {e:.2e}"))?;
    }
    for id in net.param_ids() {
        if !store.get(id).trainable() {
            continue;
        }
        for j in pick(store.get(id).value.len(), rng) {
            let orig = store.get(id).value[j];
            let mut f = |v: f64| {
                store.get_mut(id).value[j] = v;
                let out = objective(&mut store, &x);
                store.get_mut(id).value[j] = orig;
                out
            };
            let num = central(&mut f, orig);
            let e = rel_err(grads.get(id)[j], num);
            worst = worst.max(e);
            ensure(e <= 1e-5, || format!("{name} case {case} {}[{j}]: rel {e:.2e}", store.get(id).name))?;
        }
    }
    Ok(worst)
}

fn layer_gradients(worst: &mut f64) -> Result<Vec<String>, String> {
    let mut rng = SeededRng::new(503);
    let mut covered = Vec::new();
    let mut run = |label: &str, build: &dyn Fn(usize, &mut SeededRng) -> (LayerSpec, Vec<usize>, bool)| -> Result<(), String> {
        let mut rng_local = rng.substream(covered.len() as u64 + 1);
        for case in 0..100 {
            let (spec, shape, away) = build(case, &mut rng_local);
            let batch = 2 + case % 3;
            let e = check_layer(spec, &shape, batch, away, case, &mut rng_local)?;
            *worst = worst.max(e);
        }
        covered.push(label.to_string());
        Ok(())
    };
    run("dense", &|case, rng| {
        let (i, o) = (1 + rng.below(6), 1 + rng.below(6));
        (LayerSpec::Dense { input: i, output: o, bias: case % 2 == 0 }, vec![i], false)
    })?;
    run("conv2d", &|case, rng| {
        let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
        let side = [4, 5, 6][case % 3];
        let spec = if case % 2 == 0 {
            LayerSpec::conv_down(ci, co, case % 4 == 0)
        } else {
            LayerSpec::Conv2d { in_channels: ci, out_channels: co, kernel: 3, stride: 1, padding: 1, bias: case % 4 == 1 }
        };
        (spec, vec![ci, side, side], false)
    })?;
    run("conv_transpose2d", &|case, rng| {
        let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
        let side = [2, 3, 4][case % 3];
        (LayerSpec::conv_up(ci, co, case % 2 == 0), vec![ci, side, side], false)
    })?;
    run("batch_norm", &|case, rng| {
        let f = 1 + rng.below(4);
        let shape = if case % 2 == 0 { vec![f] } else { vec![f, 3, 3] };
        (LayerSpec::batch_norm(f), shape, false)
    })?;
    run("leaky_relu", &|_, rng| (LayerSpec::leaky_relu(), vec![1 + rng.below(8)], true))?;
    run("sigmoid", &|_, rng| (LayerSpec::Sigmoid, vec![1 + rng.below(8)], false))?;
    run("flatten", &|_, rng| (LayerSpec::Flatten, vec![1 + rng.below(3), 2, 3], false))?;
    run("reshape", &|_, rng| {
        let c = 1 + rng.below(3);
        (LayerSpec::Reshape { shape: vec![c, 2, 2] }, vec![4 * c], false)
    })?;
    for case in 0..100 {
        let n = 1 + rng.below(10);
        let b = 1 + rng.below(3);
        let p: Vec<f64> = (0..n * b).map(|_| rng.range(0.05, 0.95)).collect();
        let t: Vec<f64> = (0..n * b).map(|_| rng.uniform()).collect();
        let x = Tensor::new(vec![b, n], t).unwrap();
        let xh = Tensor::new(vec![b, n], p.clone()).unwrap();
        let (_, g) = bernoulli_nll(&xh, &x).map_err(|e| e.to_string())?;
        for i in 0..n * b {
            let mut f = |v: f64| {
                let mut q = p.clone();
                q[i] = v;
                bernoulli_nll(&Tensor::new(vec![b, n], q).unwrap(), &x).unwrap().0
            };
            let e = rel_err(g.data()[i], central(&mut f, p[i]));
            *worst = worst.max(e);
            ensure(e <= 1e-5, || format!("bernoulli case {case} [{i}]: rel {e:.2e}"))?;
        }
    }
    covered.push("bernoulli".into());
    Ok(covered)
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let (mut wg, mut ws, mut wl) = (0.0, 0.0, 0.0);
    gyroplane_gradients(&mut wg)?;
    sampling_path_gradients(&mut ws)?;
    let covered = layer_gradients(&mut wl)?;
    within(start.elapsed(), 120, "gradient suite")?;
    Ok(format!(
        "gyroplane {wg:.1e}, sampling path {ws:.1e}, layers {wl:.1e} ({})",
        covered.join(" ")
    ))
}

// 6 -------------------------------------------------------------------------

/// `∫ q(z) dvol` in chart polar coordinates around the origin, with the
/// chart radius parametrised by geodesic radius `r`.
fn total_mass(k: f64, mu: &[f64], sigma: f64) -> f64 {
    let s = k.abs().sqrt();
    let r_max = if k > 0.0 { std::f64::consts::PI / s } else { 2.0 * ops::distance(k, &[0.0, 0.0], mu) + 14.0 * sigma };
    let (nr, nphi) = (4000, 720);
    let dr = r_max / nr as f64;
    let dphi = 2.0 * std::f64::consts::PI / nphi as f64;
    let sig = [sigma, sigma];
    let mut total = 0.0;
    for i in 0..nr {
        let r = (i as f64 + 0.5) * dr;
        let (rho, drho) = if k > 0.0 {
            let a = s * r / 2.0;
            (a.tan() / s, 0.5 / a.cos().powi(2))
        } else {
            let a = s * r / 2.0;
            (a.tanh() / s, 0.5 / a.cosh().powi(2))
        };
        let lam = 2.0 / (1.0 + k * rho * rho);
        let mut ring = 0.0;
        for j in 0..nphi {
            let phi = j as f64 * dphi;
            let z = [rho * phi.cos(), rho * phi.sin()];
            ring += log_prob(k, mu, &sig, &z).exp();
        }
        total += ring * lam * lam * rho * drho * dr * dphi;
    }
    total
}

fn wrapped_normal_normalisation() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in [-1.0f64, -0.5, 0.5, 1.0] {
        for sigma in [0.3, 0.7] {
            let s: f64 = k.abs().sqrt();
            let mu = [0.3 / s, -0.2 / s];
            let m = total_mass(k, &mu, sigma);
            worst = worst.max((m - 1.0).abs());
            ensure((m - 1.0).abs() <= 1e-2, || format!("k={k} σ={sigma}: total mass {m}"))?;
        }
    }
    let mut kl_line = Vec::new();
    for (i, &k) in REGIMES.iter().enumerate() {
        for sigma0 in [0.5, 1.0] {
            let mut rng = SeededRng::new(600 + i as u64);
            let prior = LatentPrior::new(curv(k), 3, sigma0).map_err(|e| e.to_string())?;
            let q = prior.as_wrapped_normal();
            let (mean, se) = kl_mc(&q, &prior, 10_000, &mut rng).map_err(|e| e.to_string())?;
            ensure(mean.abs() <= 3.0 * se, || format!("k={k} σ0={sigma0}: KL(q‖q) = {mean:.3e} ± {se:.3e}"))?;
            kl_line.push(format!("{:.1}", mean / se));
        }
    }
    within(start.elapsed(), 60, "normalisation")?;
    Ok(format!("max |mass−1| {worst:.2e}; KL(q‖q)/SE {}", kl_line.join(" ")))
}

// 7 -------------------------------------------------------------------------

fn sum_sq_dist(k: f64, c: &[f64], pts: &[ManifoldPoint]) -> f64 {
    pts.iter().map(|p| ops::distance(k, c, p.coords()).powi(2)).sum()
}

/// Grid search on a box around the points, zooming in on the best cell.
fn zoom_search(k: f64, pts: &[ManifoldPoint]) -> Vec<f64> {
    let mut centre = [0.0, 0.0];
    for p in pts {
        centre[0] += p.coords()[0] / pts.len() as f64;
        centre[1] += p.coords()[1] / pts.len() as f64;
    }
    let mut half = pts
        .iter()
        .map(|p| max_abs_diff(p.coords(), &centre))
        .fold(0.0, f64::max)
        * 1.5;
    let limit = if k < 0.0 { 0.999 / (-k).sqrt() } else { f64::INFINITY };
    for _ in 0..12 {
        let n = 61;
        let mut best = (f64::INFINITY, centre);
        for i in 0..n {
            for j in 0..n {
                let c = [
                    centre[0] - half + 2.0 * half * i as f64 / (n - 1) as f64,
                    centre[1] - half + 2.0 * half * j as f64 / (n - 1) as f64,
                ];
                if ops::norm(&c) >= limit {
                    continue;
                }
                let v = sum_sq_dist(k, &c, pts);
                if v < best.0 {
                    best = (v, c);
                }
            }
        }
        centre = best.1;
        half *= 0.2;
    }
    centre.to_vec()
}

fn karcher_oracle() -> Check {
    let start = Instant::now();
    let (mut w2, mut w3): (f64, f64) = (0.0, 0.0);
    for (ri, &k) in REGIMES.iter().enumerate() {
        let mut rng = SeededRng::new(700 + ri as u64);
        let reach = if k > 0.0 { 0.5 } else { 1.0 };
        for _ in 0..50 {
            let x = random_point(k, 2 + rng.below(4), reach, &mut rng);
            let y = random_point(k, x.dim(), reach, &mut rng);
            let m = karcher_mean(&[x.clone(), y.clone()], &[1.0, 1.0]).map_err(|e| e.to_string())?;
            let mid = geodesic(&x, &y, 0.5).map_err(|e| e.to_string())?;
            let e = max_abs_diff(m.coords(), mid.coords());
            w2 = w2.max(e);
            ensure(e <= 1e-8, || format!("k={k}: two-point mean off the midpoint by {e:.2e}"))?;
        }
        for _ in 0..10 {
            let pts: Vec<ManifoldPoint> = (0..3).map(|_| random_point(k, 2, reach, &mut rng)).collect();
            let m = karcher_mean(&pts, &[1.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
            let g = zoom_search(k, &pts);
            let e = max_abs_diff(m.coords(), &g);
            w3 = w3.max(e);
            ensure(e <= 2e-3, || format!("k={k}: three-point mean {:?} vs grid {g:?}", m.coords()))?;
        }
    }
    within(start.elapsed(), 60, "karcher oracle")?;
    Ok(format!("midpoint {w2:.1e}, three-point vs grid {w3:.1e}"))
}

// 8 -------------------------------------------------------------------------

fn micro_config(k: f64) -> SpVaeConfig {
    SpVaeConfig {
        curvature: k,
        latent_dim: 2,
        hidden: 0,
        channels: vec![],
        gyro_width: 3,
        image_size: 4,
        seed: 3,
        ..SpVaeConfig::default()
    }
}

/// Textbook Gaussian β-VAE in the metric coordinate `y = 2z`:
/// `y ~ N(2μ, σ²)`, prior `N(0, σ0²)`, features `⟨a_j, y − 2p_j⟩`.
struct EuclideanVae {
    enc_w: Vec<f64>,
    enc_b: Vec<f64>,
    dec_w: Vec<f64>,
    dec_b: Vec<f64>,
    offsets: Vec<f64>,
    normals: Vec<f64>,
    d: usize,
    m: usize,
    pixels: usize,
    sigma0: f64,
}

impl EuclideanVae {
    fn from_store(store: &ParamStore, cfg: &SpVaeConfig) -> Self {
        let get = |n: &str| store.value(store.find(n).unwrap()).to_vec();
        Self {
            enc_w: get("encoder.1.weight"),
            enc_b: get("encoder.1.bias"),
            dec_w: get("decoder.0.weight"),
            dec_b: get("decoder.0.bias"),
            offsets: get("gyro.offsets"),
            normals: get("gyro.normals"),
            d: cfg.latent_dim,
            m: cfg.gyro_width,
            pixels: cfg.pixels(),
            sigma0: cfg.sigma0,
        }
    }

    fn head(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out: Vec<f64> = (0..2 * self.d)
            .map(|o| self.enc_b[o] + (0..self.pixels).map(|i| self.enc_w[o * self.pixels + i] * x[i]).sum::<f64>())
            .collect();
        let mu = out[..self.d].to_vec();
        let sigma = out[self.d..].iter().map(|s| (1.0 + s.exp()).ln() + 1e-6).collect();
        (mu, sigma)
    }

    fn recon(&self, y: &[f64], x: &[f64]) -> f64 {
        let feats: Vec<f64> = (0..self.m)
            .map(|j| (0..self.d).map(|i| self.normals[j * self.d + i] * (y[i] - 2.0 * self.offsets[j * self.d + i])).sum())
            .collect();
        (0..self.pixels)
            .map(|o| {
                let pre = self.dec_b[o] + (0..self.m).map(|j| self.dec_w[o * self.m + j] * feats[j]).sum::<f64>();
                Likelihood::Bernoulli.pixel_nll(1.0 / (1.0 + (-pre).exp()), x[o])
            })
            .sum()
    }

    fn kl(&self, mu: &[f64], sigma: &[f64]) -> f64 {
        let s0 = self.sigma0;
        mu.iter()
            .zip(sigma)
            .map(|(m, s)| (s0 / s).ln() + (s * s + 4.0 * m * m) / (2.0 * s0 * s0) - 0.5)
            .sum()
    }
}

fn flat_equivalence() -> Check {
    let start = Instant::now();
    let cfg = micro_config(0.0);
    let model = SpVaeModel::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(800);
    let b = 4;
    let x = Tensor::new(vec![b, 1, 4, 4], (0..b * 16).map(|_| rng.uniform()).collect()).unwrap();

    let n = 20_000;
    let mut totals = Vec::with_capacity(n);
    let mut beta = 0.0;
    for _ in 0..n {
        let r = model.elbo(&x, 1, &mut rng).map_err(|e| e.to_string())?;
        beta = r.beta;
        totals.push(r.total);
    }
    let (model_mean, model_se) = mean_and_standard_error(&totals);

    let reference = EuclideanVae::from_store(model.store(), &cfg);
    let mut oracle_rng = SeededRng::new(801);
    let mut kl = 0.0;
    let heads: Vec<_> = (0..b).map(|i| reference.head(x.sample(i))).collect();
    for (mu, sigma) in &heads {
        kl += reference.kl(mu, sigma) / b as f64;
    }
    let mut recons = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r = 0.0;
        for (i, (mu, sigma)) in heads.iter().enumerate() {
            let y: Vec<f64> = mu.iter().zip(sigma).map(|(m, s)| 2.0 * m + s * oracle_rng.normal()).collect();
            r += reference.recon(&y, x.sample(i)) / b as f64;
        }
        recons.push(r);
    }
    let (recon_mean, recon_se) = mean_and_standard_error(&recons);
    let oracle = recon_mean + beta * kl;
    let se = (model_se.powi(2) + recon_se.powi(2)).sqrt();
    ensure((model_mean - oracle).abs() <= 3.0 * se, || {
        format!("ELBO {model_mean:.5} vs Euclidean reference {oracle:.5} (SE {se:.2e})")
    })?;

    let scfg = SvddConfig {
        curvature: 0.0,
        channels: vec![],
        hidden: 8,
        gyro_width: 4,
        image_size: 8,
        ..SvddConfig::default()
    };
    let mut svdd = SvddModel::new(scfg).map_err(|e| e.to_string())?;
    let imgs = Tensor::new(vec![50, 1, 8, 8], (0..50 * 64).map(|_| rng.uniform()).collect()).unwrap();
    let c = svdd.init_center(&imgs).map_err(|e| e.to_string())?;
    let flat = svdd.embed_flat(&imgs).map_err(|e| e.to_string())?;
    let d = 2;
    let mut mean = vec![0.0; d];
    for row in flat.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= 50.0;
    }
    ensure(c.coords() == mean.as_slice(), || format!("center {:?} vs mean {mean:?}", c.coords()))?;
    within(start.elapsed(), 120, "flat equivalence")?;
    Ok(format!(
        "ELBO {model_mean:.4} vs {oracle:.4} (|Δ| {:.1e}, 3SE {:.1e}); SVDD center = mean",
        (model_mean - oracle).abs(),
        3.0 * se
    ))
}

// 9, 10 ---------------------------------------------------------------------

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn overrides(config: &str, out: &Path, seed: u64) -> Overrides {
    Overrides {
        config: Some(config_path(config)),
        output_dir: Some(out.to_path_buf()),
        seed: Some(seed),
        ..Overrides::default()
    }
}

fn anomaly_benchmark() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut recalls, mut ious, mut margins) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let out = root.path().join(format!("seed{seed}"));
        let start = Instant::now();
        let cfg = overrides("benchmark.json", &out, seed).resolve(Task::TrainVae).map_err(|e| e.to_string())?;
        cmd_train_vae(&cfg).map_err(|e| e.to_string())?;
        let mut o = overrides("benchmark.json", &out, seed);
        o.checkpoint = Some(out.join("vae_checkpoint"));
        let cfg = o.resolve(Task::Score).map_err(|e| e.to_string())?;
        let s = cmd_score(&cfg).map_err(|e| e.to_string())?;
        within(start.elapsed(), 600, &format!("seed {seed}"))?;
        let recall = s.recall.ok_or("no ground truth")?;
        let iou = s.iou.ok_or("no ground truth")?;
        let flag_rate = s.n_flagged as f64 / s.n_test as f64;
        recalls.push(recall);
        ious.push(iou);
        margins.push(recall - flag_rate);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, i, m) = (mean(&recalls), mean(&ious), mean(&margins));
    let detail = format!("recall {r:.3}, IoU {i:.3}, recall − flag rate {m:.3} (5 seeds)");
    ensure(r >= 0.9 && i >= 0.30, || detail.clone())?;
    ensure(m > 0.3, || format!("no better than a random scorer: {detail}"))?;
    Ok(detail)
}

fn svdd_separation() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut aucs = Vec::new();
    for seed in 0..5 {
        let out = root.path().join(format!("seed{seed}"));
        let start = Instant::now();
        let cfg = overrides("svdd_benchmark.json", &out, seed).resolve(Task::Svdd).map_err(|e| e.to_string())?;
        let s = cmd_svdd(&cfg).map_err(|e| e.to_string())?;
        within(start.elapsed(), 300, &format!("seed {seed}"))?;
        aucs.push(s.auc_test.ok_or("no labels")?);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let min = aucs.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!("test AUC mean {mean:.3}, min {min:.3} (5 seeds)");
    ensure(mean >= 0.9, || detail.clone())?;
    Ok(detail)
}

// 11 ------------------------------------------------------------------------

fn interpolation_contract() -> Check {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_normal: 96,
        n_anomalous: 0,
        size: 16,
        ..SyntheticSpec::default()
    };
    let set = gen_synthetic(&spec, &mut SeededRng::new(1100)).map_err(|e| e.to_string())?;
    let cfg = SpVaeConfig {
        curvature: -1.0,
        latent_dim: 2,
        hidden: 64,
        channels: vec![],
        gyro_width: 16,
        image_size: 16,
        batch_size: 16,
        lr: 1e-3,
        max_epochs: 3,
        seed: 5,
        ..SpVaeConfig::default()
    };
    let mut model = SpVaeModel::new(cfg).map_err(|e| e.to_string())?;
    model.fit(&set.all_tensor(), None).map_err(|e| e.to_string())?;
    let k = model.curvature();
    let (xa, xb) = (set.image(0), set.image(1));

    let geo = interpolate_pair(&model, xa, xb, 10, InterpolationMode::Geodesic).map_err(|e| e.to_string())?;
    let steps: Vec<f64> = geo.latents.windows(2).map(|p| ops::distance(k, &p[0], &p[1])).collect();
    let spread = steps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - steps.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(spread <= 1e-6, || format!("geodesic steps {steps:?}"))?;

    let (ra, _) = model.reconstruct(&Tensor::new(vec![1, 1, 16, 16], xa.to_vec()).unwrap()).map_err(|e| e.to_string())?;
    let (rb, _) = model.reconstruct(&Tensor::new(vec![1, 1, 16, 16], xb.to_vec()).unwrap()).map_err(|e| e.to_string())?;
    ensure(geo.frames.sample(0) == ra.data(), || "frame 0 differs from the reconstruction of image a".into())?;
    ensure(geo.frames.sample(9) == rb.data(), || "last frame differs from the reconstruction of image b".into())?;

    let g3 = interpolate_pair(&model, xa, xb, 3, InterpolationMode::Geodesic).map_err(|e| e.to_string())?;
    let l3 = interpolate_pair(&model, xa, xb, 3, InterpolationMode::Linear).map_err(|e| e.to_string())?;
    let gap = ops::distance(k, &g3.latents[1], &l3.latents[1]);
    let (za, zb) = (&g3.latents[0], &g3.latents[2]);
    let sym = (ops::distance(k, za, &g3.latents[1]) - ops::distance(k, &g3.latents[1], zb)).abs();
    ensure(gap > 0.0, || "linear and geodesic midpoints coincide".into())?;
    ensure(sym <= 1e-9, || format!("geodesic midpoint is not equidistant ({sym:.2e})"))?;
    within(start.elapsed(), 60, "interpolation")?;
    Ok(format!("step spread {spread:.1e}, midpoint gap {gap:.3e}, endpoints exact"))
}

// 12 ------------------------------------------------------------------------

const DETERMINISM_CONFIG: &str = r#"{
  "curvature": -1.0,
  "latent_dim": 2,
  "seed": 4,
  "dataset": {"synthetic": {"n_normal": 60, "n_anomalous": 12, "size": 16}},
  "vae": {"hidden": 32, "channels": [8], "gyro_width": 8, "image_size": 16, "max_epochs": 2, "batch_size": 16, "lr": 0.001},
  "svdd": {"hidden": 16, "channels": [4], "gyro_width": 8, "image_size": 16, "pretrain_epochs": 2, "finetune_epochs": 2, "batch_size": 16}
}
"#;

fn run_binary(dir: &Path, config: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stereovae"))
        .current_dir(dir)
        .args(args)
        .arg("--config")
        .arg(config)
        .args(["--output-dir", "."])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = root.path().join("config.json");
    std::fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        run_binary(&dir, &config, &["train-vae"])?;
        run_binary(&dir, &config, &["score", "--checkpoint", "vae_checkpoint"])?;
        run_binary(&dir, &config, &["svdd"])?;
        dirs.push(dir);
    }
    let (fa, fb) = (files_under(&dirs[0]), files_under(&dirs[1]));
    ensure(fa == fb, || format!("file lists differ: {fa:?} vs {fb:?}"))?;
    for required in ["vae_checkpoint/params.bin", "svdd_checkpoint/params.bin", "train-vae.json", "svdd.json", "metrics.json"] {
        ensure(fa.iter().any(|p| p == Path::new(required)), || format!("missing {required}"))?;
    }
    for f in &fa {
        let a = std::fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{} differs between runs", f.display()))?;
    }
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Check);

const CRITERIA: [Criterion; 12] = [
    ("gyrogroup identities", gyrogroup_identities),
    ("isometry through the ambient lift", isometry),
    ("arc and gyro distance forms agree", distance_forms),
    ("hyperplane distance vs brute force", hyperplane_oracle),
    ("gradients vs finite differences", gradient_suite),
    ("wrapped-normal normalisation", wrapped_normal_normalisation),
    ("Karcher mean oracle", karcher_oracle),
    ("flat-limit equivalence", flat_equivalence),
    ("synthetic anomaly benchmark", anomaly_benchmark),
    ("SVDD separation", svdd_separation),
    ("interpolation contract", interpolation_contract),
    ("determinism", determinism),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
