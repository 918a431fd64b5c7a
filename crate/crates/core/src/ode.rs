//! Small ODE toolkit: adaptive Dormand–Prince 5(4) with an L1 error norm and
//! a fixed-step classical Runge–Kutta stepper.

use crate::error::OdeError;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Fifth minus fourth order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DopriOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for DopriOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-7,
            atol: 1e-12,
            max_steps: 10_000_000,
        }
    }
}

/// Reusable Dormand–Prince integrator. Keeps its work buffers and the last
/// accepted step size between calls; the derivative is re-evaluated at the
/// start of every call, so callers may rescale `y` in between.
pub struct Dopri {
    pub options: DopriOptions,
    /// Suggested next step; `None` lets the integrator pick one.
    pub step: Option<f64>,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    pub steps_taken: usize,
}

impl Dopri {
    pub fn new(options: DopriOptions) -> Self {
        Self {
            options,
            step: None,
            k: Default::default(),
            tmp: Vec::new(),
            y_new: Vec::new(),
            steps_taken: 0,
        }
    }

    fn resize(&mut self, n: usize) {
        if self.tmp.len() != n {
            for k in &mut self.k {
                k.clear();
                k.resize(n, 0.0);
            }
            self.tmp = vec![0.0; n];
            self.y_new = vec![0.0; n];
        }
    }

    /// Integrates `y' = f(t, y)` from `t0` to `t1` in place.
    pub fn integrate<F>(&mut self, mut f: F, t0: f64, t1: f64, y: &mut [f64]) -> Result<(), OdeError>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        self.resize(n);
        if t1 <= t0 {
            return Ok(());
        }
        let mut t = t0;
        f(t, y, &mut self.k[0]);
        let span = t1 - t0;
        let mut h = match self.step {
            Some(h) if h > 0.0 => h.min(span),
            _ => self.initial_step(y, span),
        };
        let mut steps = 0usize;
        loop {
            let last = t + h >= t1 - 1e-14 * t1.abs().max(1.0);
            let planned = h;
            if last {
                h = t1 - t;
            }
            self.stage(&mut f, t, h, y);
            let mut err_sum = 0.0;
            let mut y_sum = 0.0;
            for i in 0..n {
                let e = h
                    * (E1 * self.k[0][i]
                        + E3 * self.k[2][i]
                        + E4 * self.k[3][i]
                        + E5 * self.k[4][i]
                        + E6 * self.k[5][i]
                        + E7 * self.k[6][i]);
                err_sum += e.abs();
                y_sum += y[i].abs().max(self.y_new[i].abs());
            }
            let err = err_sum / (self.options.atol * n as f64 + self.options.rtol * y_sum);
            if !err.is_finite() {
                return Err(OdeError::NonFinite(t));
            }
            steps += 1;
            if steps > self.options.max_steps {
                return Err(OdeError::TooManySteps(t));
            }
            if err <= 1.0 {
                t = if last { t1 } else { t + h };
                y.copy_from_slice(&self.y_new);
                // First-same-as-last: k7 is f(t + h, y_new).
                self.k.swap(0, 6);
                self.steps_taken += 1;
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                let h_next = h * fac;
                if last {
                    // A truncated final step says little about the natural step size.
                    self.step = Some(if h < planned { planned } else { h_next });
                    return Ok(());
                }
                h = h_next;
            } else {
                h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(OdeError::StepUnderflow(t));
                }
            }
        }
    }

    fn initial_step(&self, y: &[f64], span: f64) -> f64 {
        let d0: f64 = y.iter().map(|v| v.abs()).sum();
        let d1: f64 = self.k[0].iter().map(|v| v.abs()).sum();
        let h = if d1 > 0.0 && d0 > 0.0 { 0.01 * d0 / d1 } else { 1e-3 * span };
        h.min(span).max(1e-12)
    }

    fn stage<F>(&mut self, f: &mut F, t: f64, h: f64, y: &[f64])
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, tmp, k6);
        for i in 0..n {
            self.y_new[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        f(t + h, &self.y_new, k7);
    }
}

/// One classical fourth-order Runge–Kutta step of size `h`.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &mut [f64], h: f64, work: &mut Rk4Work)
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    work.resize(n);
    let Rk4Work { k1, k2, k3, k4, tmp } = work;
    f(t, y, k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, tmp, k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, tmp, k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, tmp, k4);
    for i in 0..n {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

#[derive(Default)]
pub struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn resize(&mut self, n: usize) {
        if self.k1.len() != n {
            for v in [&mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4, &mut self.tmp] {
                v.clear();
                v.resize(n, 0.0);
            }
        }
    }
}
