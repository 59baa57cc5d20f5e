//! Model variants and their structural description.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{init_params, Architecture, ArgRole, FieldSignature, InitScheme, MlpParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `dz/dt = f(z(t))`.
    Node,
    /// `dz/dt = f(z(t), z(t - τ))` with constant history `x`.
    Ndde,
    /// NODE on the state padded with `augment_dim` zeros.
    Anode,
    /// `dz/dt = f(z(⌊t/τ⌋τ))`.
    NpcddeSimple,
    /// `dz/dt = f(z(⌊t/τ⌋τ), z(⌊(t-τ)/τ⌋τ))`.
    NpcddeSkip,
    /// Current state plus any set of frozen grid states, shared parameters.
    NpcddeGeneric,
    /// As `NpcddeGeneric` with one parameter set per interval.
    Unpcdde,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Node,
        ModelKind::Ndde,
        ModelKind::Anode,
        ModelKind::NpcddeSimple,
        ModelKind::NpcddeSkip,
        ModelKind::NpcddeGeneric,
        ModelKind::Unpcdde,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Node => "node",
            ModelKind::Ndde => "ndde",
            ModelKind::Anode => "anode",
            ModelKind::NpcddeSimple => "npcdde_simple",
            ModelKind::NpcddeSkip => "npcdde_skip",
            ModelKind::NpcddeGeneric => "npcdde_generic",
            ModelKind::Unpcdde => "unpcdde",
        }
    }

    /// Default argument list for `n` intervals.
    pub fn default_roles(self, n_intervals: usize) -> Vec<ArgRole> {
        match self {
            ModelKind::Node | ModelKind::Anode => vec![ArgRole::Current],
            ModelKind::Ndde => vec![ArgRole::Current, ArgRole::Delayed],
            ModelKind::NpcddeSimple => vec![ArgRole::Grid(0)],
            ModelKind::NpcddeSkip => vec![ArgRole::Grid(0), ArgRole::Grid(1)],
            ModelKind::NpcddeGeneric | ModelKind::Unpcdde => std::iter::once(ArgRole::Current)
                .chain((0..=n_intervals).map(ArgRole::Grid))
                .collect(),
        }
    }

    fn uses_grid(self) -> bool {
        !matches!(self, ModelKind::Node | ModelKind::Anode | ModelKind::Ndde)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
    /// `z(t) = z(kτ) + (t - kτ) c`; valid only when the field ignores `z(t)`.
    ExactConstantField,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Shared(MlpParams),
    PerInterval(Vec<MlpParams>),
}

impl ModelParams {
    pub fn sets(&self) -> &[MlpParams] {
        match self {
            ModelParams::Shared(p) => std::slice::from_ref(p),
            ModelParams::PerInterval(ps) => ps,
        }
    }

    pub fn sets_mut(&mut self) -> &mut [MlpParams] {
        match self {
            ModelParams::Shared(p) => std::slice::from_mut(p),
            ModelParams::PerInterval(ps) => ps,
        }
    }

    /// Index of the parameter set used on interval `k`.
    pub fn set_index(&self, k: usize) -> usize {
        match self {
            ModelParams::Shared(_) => 0,
            ModelParams::PerInterval(_) => k,
        }
    }

    pub fn for_interval(&self, k: usize) -> &MlpParams {
        &self.sets()[self.set_index(k)]
    }

    pub fn param_count(&self) -> usize {
        self.sets().iter().map(MlpParams::param_count).sum()
    }

    /// Start of each set's block in the flat layout.
    pub fn offsets(&self) -> Vec<usize> {
        self.sets()
            .iter()
            .scan(0, |off, p| {
                let start = *off;
                *off += p.param_count();
                Some(start)
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.sets() {
            p.write_flat(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.sets_mut() {
            let n = p.param_count();
            p.set_flat(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }
}

/// Full description of a continuous-depth model: variant, time grid, solver
/// and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub tau: f64,
    pub n_intervals: usize,
    pub substeps: usize,
    pub integrator: Integrator,
    pub augment_dim: usize,
    pub signature: FieldSignature,
    pub params: ModelParams,
}

impl ModelSpec {
    pub fn builder(kind: ModelKind, data_dim: usize) -> ModelBuilder {
        ModelBuilder::new(kind, data_dim)
    }

    pub fn state_dim(&self) -> usize {
        self.signature.state_dim
    }

    pub fn data_dim(&self) -> usize {
        self.state_dim() - self.augment_dim
    }

    pub fn final_time(&self) -> f64 {
        self.n_intervals as f64 * self.tau
    }

    /// Solver step `τ / substeps`.
    pub fn dt(&self) -> f64 {
        self.tau / self.substeps as f64
    }

    pub fn total_steps(&self) -> usize {
        self.n_intervals * self.substeps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.n_intervals == 0 || self.substeps == 0 {
            return bad("n_intervals and substeps must be positive".into());
        }
        let sig = &self.signature;
        if sig.state_dim == 0 || sig.roles.is_empty() {
            return bad("field needs a positive state dimension and at least one argument".into());
        }
        for (i, r) in sig.roles.iter().enumerate() {
            if sig.roles[..i].contains(r) {
                return bad(format!("argument role {r:?} listed twice"));
            }
        }
        match self.kind {
            ModelKind::Node | ModelKind::Anode => {
                if sig.roles != [ArgRole::Current] {
                    return bad(format!("{} fields take only the current state", self.kind));
                }
            }
            ModelKind::Ndde => {
                if !sig.roles.contains(&ArgRole::Delayed)
                    || sig.roles.iter().any(|r| matches!(r, ArgRole::Grid(_)))
                {
                    return bad("ndde fields take z(t - tau) and optionally z(t)".into());
                }
            }
            ModelKind::NpcddeSimple | ModelKind::NpcddeSkip => {
                if sig.roles != self.kind.default_roles(self.n_intervals) {
                    return bad(format!("{} has a fixed argument list", self.kind));
                }
            }
            ModelKind::NpcddeGeneric | ModelKind::Unpcdde => {
                if sig.roles.contains(&ArgRole::Delayed) {
                    return bad(format!("{} cannot take a continuous delay", self.kind));
                }
            }
        }
        if (self.kind == ModelKind::Anode) != (self.augment_dim > 0) {
            return bad("augment_dim must be positive exactly for anode".into());
        }
        if self.augment_dim >= sig.state_dim {
            return bad("augmented state must keep at least one data component".into());
        }
        if self.integrator == Integrator::ExactConstantField
            && (!self.kind.uses_grid() || sig.has_current())
        {
            return bad("exact_constant_field needs a field that ignores z(t)".into());
        }
        match (&self.params, self.kind) {
            (ModelParams::PerInterval(ps), ModelKind::Unpcdde) => {
                if ps.len() != self.n_intervals {
                    return bad(format!(
                        "unpcdde needs {} parameter sets, got {}",
                        self.n_intervals,
                        ps.len()
                    ));
                }
            }
            (ModelParams::Shared(_), ModelKind::Unpcdde) => {
                return bad("unpcdde needs one parameter set per interval".into());
            }
            (ModelParams::PerInterval(_), _) => {
                return bad(format!("{} shares one parameter set", self.kind));
            }
            (ModelParams::Shared(_), _) => {}
        }
        for p in self.params.sets() {
            sig.check(p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelBuilder {
    kind: ModelKind,
    data_dim: usize,
    tau: f64,
    n_intervals: usize,
    substeps: usize,
    integrator: Option<Integrator>,
    augment_dim: usize,
    roles: Option<Vec<ArgRole>>,
}

impl ModelBuilder {
    pub fn new(kind: ModelKind, data_dim: usize) -> Self {
        Self {
            kind,
            data_dim,
            tau: 1.0,
            n_intervals: 1,
            substeps: 20,
            integrator: None,
            augment_dim: usize::from(kind == ModelKind::Anode),
            roles: None,
        }
    }

    pub fn tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn intervals(mut self, n: usize) -> Self {
        self.n_intervals = n;
        self
    }

    pub fn substeps(mut self, s: usize) -> Self {
        self.substeps = s;
        self
    }

    pub fn integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = Some(integrator);
        self
    }

    pub fn augment(mut self, dim: usize) -> Self {
        self.augment_dim = dim;
        self
    }

    pub fn roles(mut self, roles: Vec<ArgRole>) -> Self {
        self.roles = Some(roles);
        self
    }

    pub fn signature(&self) -> FieldSignature {
        FieldSignature::new(
            self.data_dim + self.augment_dim,
            self.roles
                .clone()
                .unwrap_or_else(|| self.kind.default_roles(self.n_intervals)),
        )
    }

    pub fn build(self, params: ModelParams) -> Result<ModelSpec> {
        let signature = self.signature();
        let integrator = self.integrator.unwrap_or(if signature.has_current() || !self.kind.uses_grid() {
            Integrator::Rk4
        } else {
            Integrator::ExactConstantField
        });
        let spec = ModelSpec {
            kind: self.kind,
            tau: self.tau,
            n_intervals: self.n_intervals,
            substeps: self.substeps,
            integrator,
            augment_dim: self.augment_dim,
            signature,
            params,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds with freshly initialised parameters. Per-interval sets use
    /// seeds `seed, seed + 1, …`.
    pub fn init(self, arch: &Architecture, scheme: InitScheme, seed: u64) -> Result<ModelSpec> {
        let sig = self.signature();
        let params = if self.kind == ModelKind::Unpcdde {
            ModelParams::PerInterval(
                (0..self.n_intervals as u64)
                    .map(|k| init_params(&sig, arch, scheme, seed.wrapping_add(k)))
                    .collect(),
            )
        } else {
            ModelParams::Shared(init_params(&sig, arch, scheme, seed))
        };
        self.build(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_signatures() {
        let s = ModelSpec::builder(ModelKind::NpcddeGeneric, 2)
            .intervals(2)
            .init(&Architecture::two_hidden(4), InitScheme::XavierUniform, 0)
            .unwrap();
        assert_eq!(
            s.signature.roles,
            vec![ArgRole::Current, ArgRole::Grid(0), ArgRole::Grid(1), ArgRole::Grid(2)]
        );
        assert_eq!(s.integrator, Integrator::Rk4);
        assert_eq!(s.params.sets()[0].in_dim(), 8);

        let s = ModelSpec::builder(ModelKind::NpcddeSimple, 1)
            .build(ModelParams::Shared(MlpParams::linear(0.0, 0.0)))
            .unwrap();
        assert_eq!(s.integrator, Integrator::ExactConstantField);

        let s = ModelSpec::builder(ModelKind::Anode, 1)
            .init(&Architecture::two_hidden(10), InitScheme::XavierUniform, 0)
            .unwrap();
        assert_eq!(s.state_dim(), 2);
        assert_eq!(s.data_dim(), 1);
    }

    #[test]
    fn final_time_is_n_tau() {
        let s = ModelSpec::builder(ModelKind::NpcddeSimple, 1)
            .tau(0.5)
            .intervals(3)
            .build(ModelParams::Shared(MlpParams::linear(1.0, 0.0)))
            .unwrap();
        assert_eq!(s.final_time(), 1.5);
        assert_eq!(s.dt(), 0.025);
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let lin = || ModelParams::Shared(MlpParams::linear(1.0, 0.0));
        assert!(ModelSpec::builder(ModelKind::Node, 1)
            .integrator(Integrator::ExactConstantField)
            .build(lin())
            .is_err());
        assert!(ModelSpec::builder(ModelKind::NpcddeSimple, 1).tau(0.0).build(lin()).is_err());
        assert!(ModelSpec::builder(ModelKind::Unpcdde, 1)
            .intervals(2)
            .roles(vec![ArgRole::Grid(0)])
            .build(ModelParams::PerInterval(vec![MlpParams::linear(1.0, 0.0)]))
            .is_err());
        assert!(ModelSpec::builder(ModelKind::Unpcdde, 1)
            .roles(vec![ArgRole::Grid(0)])
            .build(lin())
            .is_err());
        // wrong input width for a two-argument field
        assert!(ModelSpec::builder(ModelKind::NpcddeSkip, 1).build(lin()).is_err());
    }

    #[test]
    fn flat_round_trip_over_sets() {
        let s = ModelSpec::builder(ModelKind::Unpcdde, 1)
            .intervals(3)
            .init(&Architecture::two_hidden(3), InitScheme::XavierUniform, 4)
            .unwrap();
        let flat = s.params.flatten();
        assert_eq!(flat.len(), s.params.param_count());
        assert_eq!(s.params.offsets(), vec![0, flat.len() / 3, 2 * flat.len() / 3]);
        let back = s.params.with_flat(&flat).unwrap();
        assert_eq!(back, s.params);
        assert_ne!(s.params.sets()[0], s.params.sets()[1]);
    }
}
