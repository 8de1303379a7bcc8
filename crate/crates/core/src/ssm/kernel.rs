//! Fused selective-scan kernel over raw slices.
//!
//! Layouts: `u, delta: len×ch`, `a: ch×n`, `b, c: len×n`, states `len×ch×n`.

/// Below this `|Δ·A|` the zero-order-hold input gain uses its series limit `Δ·B`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Zero-order-hold factors for one diagonal entry: `(Ā, φ)` with `B̄ = φ·B`.
#[inline]
pub fn zoh_factors(delta: f64, a: f64) -> (f64, f64) {
    let z = delta * a;
    let em = z.exp_m1();
    let phi = if z.abs() < ZOH_LIMIT { delta } else { em / z * delta };
    (1.0 + em, phi)
}

pub struct ScanShape {
    pub len: usize,
    pub ch: usize,
    pub n: usize,
}

/// Values kept from the forward pass: hidden states and discretized factors,
/// each `len×ch×n`.
#[derive(Debug)]
pub struct ScanCache {
    pub states: Vec<f64>,
    pub a_bar: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Sequential left-to-right scan from a zero state. Returns `(y, cache)`.
pub fn scan_forward(s: &ScanShape, u: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> (Vec<f64>, ScanCache) {
    let (len, ch, n) = (s.len, s.ch, s.n);
    let mut y = vec![0.0; len * ch];
    let mut cache =
        ScanCache { states: vec![0.0; len * ch * n], a_bar: vec![0.0; len * ch * n], phi: vec![0.0; len * ch * n] };
    for t in 0..len {
        let (b_t, c_t) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n]);
        for k in 0..ch {
            let dt = delta[t * ch + k];
            let x = u[t * ch + k];
            let a_k = &a[k * n..(k + 1) * n];
            let base = (t * ch + k) * n;
            let mut acc = 0.0;
            for i in 0..n {
                let (a_bar, phi) = zoh_factors(dt, a_k[i]);
                let prev = if t > 0 { cache.states[base - ch * n + i] } else { 0.0 };
                let h = a_bar * prev + phi * b_t[i] * x;
                cache.states[base + i] = h;
                cache.a_bar[base + i] = a_bar;
                cache.phi[base + i] = phi;
                acc += c_t[i] * h;
            }
            y[t * ch + k] = acc;
        }
    }
    (y, cache)
}

/// Gradient buffers for [`scan_backward`]; each is accumulated into.
pub struct ScanGrads<'a> {
    pub u: Option<&'a mut [f64]>,
    pub delta: Option<&'a mut [f64]>,
    pub a: Option<&'a mut [f64]>,
    pub b: Option<&'a mut [f64]>,
    pub c: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    s: &ScanShape,
    gy: &[f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    cache: &ScanCache,
    mut g: ScanGrads<'_>,
) {
    let states = &cache.states;
    let (len, ch, n) = (s.len, s.ch, s.n);
    // carry[k,i] = Ā_{t+1}·∂L/∂h_t contributed from step t+1
    let mut carry = vec![0.0; ch * n];
    for t in (0..len).rev() {
        let (b_t, c_t) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n]);
        for k in 0..ch {
            let dt = delta[t * ch + k];
            let x = u[t * ch + k];
            let gyv = gy[t * ch + k];
            let base = (t * ch + k) * n;
            let mut g_u = 0.0;
            let mut g_dt = 0.0;
            for i in 0..n {
                let a_ki = a[k * n + i];
                let z = dt * a_ki;
                let (a_bar, phi) = (cache.a_bar[base + i], cache.phi[base + i]);
                let (dphi_ddt, dphi_da) = if z.abs() < ZOH_LIMIT {
                    (1.0, 0.0)
                } else if z.abs() < 1e-3 {
                    // series of d/dz [expm1(z)/z], the closed form cancels here
                    (a_bar, dt * dt * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0))
                } else {
                    (a_bar, (dt * a_bar - phi) / a_ki)
                };
                let h = states[base + i];
                let prev = if t > 0 { states[base - ch * n + i] } else { 0.0 };
                let gh = carry[k * n + i] + c_t[i] * gyv;
                if let Some(gc) = g.c.as_deref_mut() {
                    gc[t * n + i] += gyv * h;
                }
                let g_abar = gh * prev;
                let g_phi = gh * b_t[i] * x;
                g_u += gh * phi * b_t[i];
                if let Some(gb) = g.b.as_deref_mut() {
                    gb[t * n + i] += gh * phi * x;
                }
                g_dt += g_abar * a_ki * a_bar + g_phi * dphi_ddt;
                if let Some(ga) = g.a.as_deref_mut() {
                    ga[k * n + i] += g_abar * dt * a_bar + g_phi * dphi_da;
                }
                carry[k * n + i] = gh * a_bar;
            }
            if let Some(gu) = g.u.as_deref_mut() {
                gu[t * ch + k] += g_u;
            }
            if let Some(gd) = g.delta.as_deref_mut() {
                gd[t * ch + k] += g_dt;
            }
        }
    }
}
