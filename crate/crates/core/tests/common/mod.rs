//! Small-n transcriptions of the AMP updates and Bethe free energies,
//! written as explicit loops over rows, plus the denoiser calculus checks.
#![allow(dead_code, clippy::needless_range_loop)]

use lowrank_amp::amp::{
    amp_step_uv, amp_step_xkx, bethe_free_energy_uv, bethe_free_energy_xkx, AmpState,
};
use lowrank_amp::channels::ScoreMatrix;
use lowrank_amp::{Matrix, Prior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Vec2 = Vec<Vec<f64>>;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec2 {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn to_matrix(v: &Vec2) -> Matrix<f64> {
    Matrix::from_rows(v).unwrap()
}

fn random_psd(rng: &mut ChaCha8Rng, r: usize) -> Vec2 {
    let g = randn(rng, r, r);
    (0..r)
        .map(|i| (0..r).map(|j| (0..r).map(|k| g[i][k] * g[j][k]).sum::<f64>() * 0.1).collect())
        .collect()
}

fn zeros(r: usize, c: usize) -> Vec2 {
    vec![vec![0.0; c]; r]
}

fn mat_vec(m: &Vec2, v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn mat_mul(a: &Vec2, b: &Vec2) -> Vec2 {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

fn trace(a: &Vec2) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

fn max_diff(a: &Matrix<f64>, b: &Vec2) -> f64 {
    a.max_abs_diff(&to_matrix(b))
}

fn priors() -> Vec<Prior<f64>> {
    vec![
        Prior::community(2).unwrap(),
        Prior::community(3).unwrap(),
        Prior::standard_gaussian(2),
        Prior::gaussian(vec![0.3, -0.2], Matrix::from_rows(&[vec![1.0, 0.4], vec![0.4, 0.8]]).unwrap()).unwrap(),
        Prior::Rademacher,
    ]
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize, m: usize, symmetric: bool) -> Vec2 {
    let mut s = randn(rng, n, m);
    if symmetric {
        for i in 0..n {
            for j in 0..i {
                s[i][j] = s[j][i];
            }
        }
    }
    s.iter().map(|row| row.iter().map(|x| 3.0 * x).collect()).collect()
}

/// Per-row XKX state: means, previous means and individual covariances.
struct LoopXkx {
    a: Vec2,
    a_old: Vec2,
    v: Vec<Vec2>,
}

impl LoopXkx {
    fn v_sum(&self, r: usize) -> Vec2 {
        let mut out = zeros(r, r);
        for vi in &self.v {
            for p in 0..r {
                for q in 0..r {
                    out[p][q] += vi[p][q];
                }
            }
        }
        out
    }

    fn fields(&self, s: &Vec2, k: &Vec2, delta: f64) -> (Vec2, Vec2) {
        let n = self.a.len();
        let r = k.len();
        let nd = n as f64 * delta;
        let mut big_a = zeros(r, r);
        for j in 0..n {
            let ka = mat_vec(k, &self.a[j]);
            for p in 0..r {
                for q in 0..r {
                    big_a[p][q] += ka[p] * ka[q] / nd;
                }
            }
        }
        let mut b = zeros(n, r);
        for i in 0..n {
            for j in 0..n {
                let ka = mat_vec(k, &self.a[j]);
                for p in 0..r {
                    b[i][p] += s[i][j] * ka[p] / (n as f64).sqrt();
                }
                let kvk = mat_mul(&mat_mul(k, &self.v[j]), k);
                let corr = mat_vec(&kvk, &self.a_old[i]);
                for p in 0..r {
                    b[i][p] -= corr[p] / nd;
                }
            }
        }
        (big_a, b)
    }

    fn step(&mut self, prior: &Prior<f64>, s: &Vec2, k: &Vec2, delta: f64, gamma: f64) {
        let (big_a, b) = self.fields(s, k, delta);
        let am = to_matrix(&big_a);
        let prev = self.a.clone();
        for i in 0..self.a.len() {
            let d = prior.denoise(&am, &b[i]).unwrap();
            for p in 0..d.mean.len() {
                self.a[i][p] = (1.0 - gamma) * d.mean[p] + gamma * prev[i][p];
                for q in 0..d.mean.len() {
                    self.v[i][p][q] = (1.0 - gamma) * d.covariance[(p, q)] + gamma * self.v[i][p][q];
                }
            }
        }
        self.a_old = prev;
    }

    fn free_energy(&self, prior: &Prior<f64>, s: &Vec2, k: &Vec2, delta: f64) -> f64 {
        let n = self.a.len();
        let nd = n as f64 * delta;
        let (big_a, b) = self.fields(s, k, delta);
        let am = to_matrix(&big_a);
        let mut phi = 0.0;
        for i in 0..n {
            phi += prior.denoise(&am, &b[i]).unwrap().log_z / n as f64;
            let mut log_zt = 0.0;
            let ka_i = mat_vec(k, &self.a[i]);
            for j in 0..n {
                let dot: f64 = ka_i.iter().zip(&self.a[j]).map(|(x, y)| x * y).sum();
                log_zt += s[i][j] * dot / (n as f64).sqrt();
                let outer_i: Vec2 = (0..k.len()).map(|p| (0..k.len()).map(|q| ka_i[p] * ka_i[q]).collect()).collect();
                let inner: Vec2 = (0..k.len())
                    .map(|p| {
                        (0..k.len())
                            .map(|q| self.a[j][p] * self.a[j][q] / 2.0 + 2.0 * self.v[j][p][q])
                            .collect()
                    })
                    .collect();
                log_zt -= trace(&mat_mul(&outer_i, &inner)) / nd;
            }
            phi -= log_zt / (2.0 * n as f64);
        }
        phi
    }
}

/// Largest deviation `(updates, free energy)` between library and loops.
pub fn xkx_oracle_errors(seed: u64) -> (f64, f64) {
    let (mut upd, mut fe_err): (f64, f64) = (0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for prior in priors() {
        let r = prior.rank();
        for (n, gamma) in [(3, 0.0), (5, 0.0), (4, 0.3)] {
            let s = random_scores(&mut rng, n, n, true);
            let k = if r == 1 {
                vec![vec![1.3]]
            } else {
                let mut k = random_psd(&mut rng, r);
                for (p, row) in k.iter_mut().enumerate() {
                    row[p] += 1.0;
                }
                k
            };
            let delta = 0.4;
            let mut lp = LoopXkx {
                a: randn(&mut rng, n, r),
                a_old: randn(&mut rng, n, r),
                v: (0..n).map(|_| random_psd(&mut rng, r)).collect(),
            };
            let mut state = AmpState::xkx(to_matrix(&lp.a), to_matrix(&lp.a_old), to_matrix(&lp.v_sum(r)));
            let sm = ScoreMatrix {
                values: to_matrix(&s),
                symmetric: true,
            };
            let km = to_matrix(&k);
            for _ in 0..4 {
                let fe = bethe_free_energy_xkx(&state, &sm, &km, delta, &prior).unwrap();
                let fe_loop = lp.free_energy(&prior, &s, &k, delta);
                fe_err = fe_err.max((fe - fe_loop).abs());

                state = amp_step_xkx(&state, &sm, &km, delta, &prior, gamma).unwrap();
                lp.step(&prior, &s, &k, delta, gamma);
                upd = upd
                    .max(max_diff(&state.x.a, &lp.a))
                    .max(max_diff(&state.x.a_old, &lp.a_old))
                    .max(max_diff(&state.x.v_sum, &lp.v_sum(r)));
            }
        }
    }
    (upd, fe_err)
}

struct LoopUv {
    u: Vec2,
    u_old: Vec2,
    su: Vec<Vec2>,
    v: Vec2,
    v_old: Vec2,
    sv: Vec<Vec2>,
}

fn sum_cov(c: &[Vec2], r: usize) -> Vec2 {
    let mut out = zeros(r, r);
    for m in c {
        for p in 0..r {
            for q in 0..r {
                out[p][q] += m[p][q];
            }
        }
    }
    out
}

impl LoopUv {
    /// `(A_u, B_u, A_v, B_v)` written row by row.
    fn fields(&self, s: &Vec2, delta: f64) -> (Vec2, Vec2, Vec2, Vec2) {
        let (n, m, r) = (self.u.len(), self.v.len(), self.u[0].len());
        let nd = n as f64 * delta;
        let sq = (n as f64).sqrt();
        let mut au = zeros(r, r);
        let mut av = zeros(r, r);
        for j in 0..m {
            for p in 0..r {
                for q in 0..r {
                    au[p][q] += self.v[j][p] * self.v[j][q] / nd;
                }
            }
        }
        for i in 0..n {
            for p in 0..r {
                for q in 0..r {
                    av[p][q] += self.u[i][p] * self.u[i][q] / nd;
                }
            }
        }
        let mut bu = zeros(n, r);
        for i in 0..n {
            for j in 0..m {
                let corr = mat_vec(&self.sv[j], &self.u_old[i]);
                for p in 0..r {
                    bu[i][p] += s[i][j] * self.v[j][p] / sq - corr[p] / nd;
                }
            }
        }
        let mut bv = zeros(m, r);
        for j in 0..m {
            for i in 0..n {
                let corr = mat_vec(&self.su[i], &self.v_old[j]);
                for p in 0..r {
                    bv[j][p] += s[i][j] * self.u[i][p] / sq - corr[p] / nd;
                }
            }
        }
        (au, bu, av, bv)
    }

    fn step(&mut self, pu: &Prior<f64>, pv: &Prior<f64>, s: &Vec2, delta: f64) {
        let (au, bu, av, bv) = self.fields(s, delta);
        let (au, av) = (to_matrix(&au), to_matrix(&av));
        self.u_old = self.u.clone();
        self.v_old = self.v.clone();
        for i in 0..self.u.len() {
            let d = pu.denoise(&au, &bu[i]).unwrap();
            self.u[i] = d.mean;
            self.su[i] = d.covariance.to_rows();
        }
        for j in 0..self.v.len() {
            let d = pv.denoise(&av, &bv[j]).unwrap();
            self.v[j] = d.mean;
            self.sv[j] = d.covariance.to_rows();
        }
    }

    fn free_energy(&self, pu: &Prior<f64>, pv: &Prior<f64>, s: &Vec2, delta: f64) -> f64 {
        let (n, m) = (self.u.len(), self.v.len());
        let nd = n as f64 * delta;
        let (au, bu, av, bv) = self.fields(s, delta);
        let (au, av) = (to_matrix(&au), to_matrix(&av));
        let mut total = 0.0;
        for i in 0..n {
            total += pu.denoise(&au, &bu[i]).unwrap().log_z;
        }
        for j in 0..m {
            total += pv.denoise(&av, &bv[j]).unwrap().log_z;
        }
        for i in 0..n {
            for j in 0..m {
                let uv: f64 = self.u[i].iter().zip(&self.v[j]).map(|(a, b)| a * b).sum();
                let usu: f64 = self.u[i].iter().zip(mat_vec(&self.sv[j], &self.u[i])).map(|(a, b)| a * b).sum();
                let vsv: f64 = self.v[j].iter().zip(mat_vec(&self.su[i], &self.v[j])).map(|(a, b)| a * b).sum();
                let log_zt = uv * s[i][j] / (n as f64).sqrt() - (usu + vsv) / nd - uv * uv / (2.0 * nd);
                total -= log_zt;
            }
        }
        total / n as f64
    }
}

pub fn uv_oracle_errors(seed: u64) -> (f64, f64) {
    let (mut upd, mut fe_err): (f64, f64) = (0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = [
        (Prior::standard_gaussian(2), Prior::community(2).unwrap()),
        (Prior::Rademacher, Prior::standard_gaussian(1)),
        (Prior::community(3).unwrap(), Prior::community(3).unwrap()),
    ];
    for (pu, pv) in pairs {
        let r = pu.rank();
        for (n, m) in [(3, 5), (5, 2), (4, 4)] {
            let s = random_scores(&mut rng, n, m, false);
            let delta = 0.7;
            let mut lp = LoopUv {
                u: randn(&mut rng, n, r),
                u_old: randn(&mut rng, n, r),
                su: (0..n).map(|_| random_psd(&mut rng, r)).collect(),
                v: randn(&mut rng, m, r),
                v_old: randn(&mut rng, m, r),
                sv: (0..m).map(|_| random_psd(&mut rng, r)).collect(),
            };
            let mut state = AmpState::uv(
                AmpState::side(to_matrix(&lp.u), to_matrix(&lp.u_old), to_matrix(&sum_cov(&lp.su, r))),
                AmpState::side(to_matrix(&lp.v), to_matrix(&lp.v_old), to_matrix(&sum_cov(&lp.sv, r))),
            );
            let sm = ScoreMatrix {
                values: to_matrix(&s),
                symmetric: false,
            };
            for _ in 0..4 {
                let fe = bethe_free_energy_uv(&state, &sm, delta, &pu, &pv).unwrap();
                let fe_loop = lp.free_energy(&pu, &pv, &s, delta);
                fe_err = fe_err.max((fe - fe_loop).abs());

                state = amp_step_uv(&state, &sm, delta, &pu, &pv, 0.0).unwrap();
                lp.step(&pu, &pv, &s, delta);
                let v = state.v.as_ref().unwrap();
                upd = upd
                    .max(max_diff(&state.x.a, &lp.u))
                    .max(max_diff(&v.a, &lp.v))
                    .max(max_diff(&state.x.v_sum, &sum_cov(&lp.su, r)))
                    .max(max_diff(&v.v_sum, &sum_cov(&lp.sv, r)));
            }
        }
    }
    (upd, fe_err)
}

pub fn calculus_priors() -> Vec<Prior<f64>> {
    vec![
        Prior::community(2).unwrap(),
        Prior::community(4).unwrap(),
        Prior::Rademacher,
        Prior::standard_gaussian(3),
        Prior::gaussian(vec![0.5, -1.0], Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]).unwrap()).unwrap(),
    ]
}

/// `A = G Gᵀ` and `B` with entries drawn uniformly from `[-2, 2]`.
pub fn random_fields(rng: &mut ChaCha8Rng, r: usize) -> (Matrix<f64>, Vec<f64>) {
    let g = Matrix::from_fn(r, r, |_, _| rng.random_range(-2.0..2.0));
    let b = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
    (g.matmul(&g.transpose()), b)
}

/// Largest `|∂ log Z/∂B − mean|` by central differences.
pub fn log_z_gradient_error(prior: &Prior<f64>, a: &Matrix<f64>, b: &[f64], h: f64) -> f64 {
    let d = prior.denoise(a, b).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..b.len() {
        let mut plus = b.to_vec();
        let mut minus = b.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let fd = (prior.denoise(a, &plus).unwrap().log_z - prior.denoise(a, &minus).unwrap().log_z) / (2.0 * h);
        worst = worst.max((fd - d.mean[j]).abs());
    }
    worst
}

/// Worst `(jacobian, gradient)` deviations over `cases` random fields per prior.
pub fn denoiser_calculus_errors(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut jac, mut grad): (f64, f64) = (0.0, 0.0);
    for prior in calculus_priors() {
        for _ in 0..cases {
            let (a, b) = random_fields(&mut rng, prior.rank());
            jac = jac.max(prior.denoise_jacobian_check(&a, &b, 1e-5).unwrap());
            grad = grad.max(log_z_gradient_error(&prior, &a, &b, 1e-5));
        }
    }
    (jac, grad)
}
