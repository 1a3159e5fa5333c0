use super::{NumericsError, ParamId, ParamStore, Tape, Var};

/// Central-difference estimate of ∂f/∂xᵢ for every coordinate of `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error found for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Finite-difference estimator of one partial derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    Central(f64),
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`
    FivePoint(f64),
}

impl Stencil {
    fn estimate<E>(self, mut f: impl FnMut(f64) -> Result<f64, E>) -> Result<f64, E> {
        Ok(match self {
            Stencil::Central(h) => (f(h)? - f(-h)?) / (2.0 * h),
            Stencil::FivePoint(h) => (f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSettings {
    pub tolerance: f64,
    /// Denominator floor of [`relative_error`].
    pub floor: f64,
    /// Estimators tried in order until one agrees. Later entries cover
    /// rounding noise on tiny derivatives and kinks (ReLU, bilinear cell
    /// edges) straddled by an earlier step.
    pub stencils: Vec<Stencil>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            floor: 1e-6,
            stencils: vec![
                Stencil::Central(1e-5),
                Stencil::FivePoint(1e-3),
                Stencil::FivePoint(1e-4),
                Stencil::Central(2e-6),
            ],
        }
    }
}

/// Compares the tape gradient of `loss` with central differences for every
/// scalar of every parameter in `store`.
pub fn check_param_gradients<E: From<NumericsError>>(
    store: &mut ParamStore,
    settings: &GradcheckSettings,
    loss: impl for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var, E>,
) -> Result<GradcheckReport, E> {
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
    {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        let grads = tape.backward(l)?;
        for (id, g) in grads.params() {
            analytic[id.index()].copy_from_slice(g);
        }
    }
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        Ok(tape.value(l).item())
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let x0 = store.value(id).data()[i];
            let mut best = f64::INFINITY;
            for &stencil in &settings.stencils {
                let numeric = stencil.estimate(|dx| {
                    store.get_mut(id).value.data_mut()[i] = x0 + dx;
                    eval(store)
                });
                store.get_mut(id).value.data_mut()[i] = x0;
                best = best.min(relative_error(analytic[id.index()][i], numeric?, settings.floor));
                if best < settings.tolerance {
                    break;
                }
            }
            worst = worst.max(best);
        }
        groups.push(GroupReport { name: store.get(id).name.clone(), scalars: n, max_rel_error: worst });
    }
    Ok(GradcheckReport { tolerance: settings.tolerance, groups })
}
