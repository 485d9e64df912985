//! Name-to-object registry: turns a [`ProblemSpec`] into a concrete kernel and
//! update map and hands them to a generic visitor.

use dsa_core::kernels::{BoxSet, ClippedArKernel, ControlledKernel, FiniteKernel, MhKernel, ProjectedLangevinKernel, TwoStateFamily};
use dsa_core::mean_field::{AffineMap, Identity, ScalarTanhMix, StateTable, TableMap, UpdateMap};
use nalgebra::DMatrix;

use crate::config::{KernelSpec, MapSpec, ProblemSpec};
use crate::error::FieldError;

/// Code that runs against whichever kernel/map pair a config names.
pub trait ProblemVisitor {
    type Output;
    fn visit<K>(self, kernel: &K, map: &dyn UpdateMap<K::State>) -> Self::Output
    where
        K: ControlledKernel,
        K::State: Send + Sync;
}

fn kernel_err(e: dsa_core::Error) -> FieldError {
    FieldError::from_core("problem.kernel", &e)
}

fn map_err(e: dsa_core::Error) -> FieldError {
    FieldError::from_core("problem.map", &e)
}

fn matrix(a: &Option<Vec<Vec<f64>>>, d: usize) -> DMatrix<f64> {
    match a {
        Some(rows) => DMatrix::from_fn(d, d, |i, j| rows[i][j]),
        None => -DMatrix::identity(d, d),
    }
}

/// Builds the problem named by `spec` with decision dimension `d` and visits it.
pub fn with_problem<V: ProblemVisitor>(spec: &ProblemSpec, d: usize, visitor: V) -> Result<V::Output, FieldError> {
    match &spec.kernel {
        KernelSpec::Finite2 { a, b, weights } => {
            let mut family = TwoStateFamily::new(a.clone(), b.clone());
            family.weights = weights.clone();
            let kernel = FiniteKernel::new(family);
            let map: Box<dyn UpdateMap<usize>> = match &spec.map {
                MapSpec::LinearHx { a, h } => {
                    let table = StateTable::new(h.clone().unwrap_or_default()).map_err(map_err)?;
                    Box::new(AffineMap::new::<usize>(matrix(a, d), table).map_err(map_err)?)
                }
                MapSpec::ScalarTanhMix { h, kappa, gamma, scale } => Box::new(
                    ScalarTanhMix::new::<usize>(
                        StateTable::scalar(h).map_err(map_err)?,
                        StateTable::scalar(kappa).map_err(map_err)?,
                        *gamma,
                        *scale,
                    )
                    .map_err(map_err)?,
                ),
                MapSpec::Table { grid, values } => {
                    Box::new(TableMap::new(grid.clone(), values.clone()).map_err(map_err)?)
                }
            };
            Ok(visitor.visit(&kernel, map.as_ref()))
        }
        KernelSpec::ClippedAr { rho, drift, sigma, clip, weights } => {
            let kernel = ClippedArKernel::new(*rho, drift.clone(), sigma.clone(), *clip)
                .map_err(kernel_err)?
                .with_weights(weights.clone());
            let map = continuous_map::<f64>(&spec.map, d)?;
            Ok(visitor.visit(&kernel, &map))
        }
        KernelSpec::ProjLangevin { eta, lo, hi, stiffness, centers, weights } => {
            let domain = BoxSet::new(lo.clone(), hi.clone()).map_err(kernel_err)?;
            let kernel = ProjectedLangevinKernel::quadratic(*eta, domain, stiffness.clone(), centers.clone(), weights.clone())
                .map_err(kernel_err)?;
            let map = continuous_map::<Vec<f64>>(&spec.map, d)?;
            Ok(visitor.visit(&kernel, &map))
        }
        KernelSpec::RwMh { dim, proposal_scale, center, target_scale, weights } => {
            let kernel = MhKernel::gaussian(*dim, *proposal_scale, center.clone(), *target_scale, weights.clone())
                .map_err(kernel_err)?;
            let map = continuous_map::<Vec<f64>>(&spec.map, d)?;
            Ok(visitor.visit(&kernel, &map))
        }
    }
}

fn continuous_map<S>(spec: &MapSpec, d: usize) -> Result<AffineMap<Identity>, FieldError>
where
    Identity: dsa_core::mean_field::Observable<S>,
{
    match spec {
        MapSpec::LinearHx { a, h: None } => AffineMap::new::<S>(matrix(a, d), Identity { dim: d }).map_err(map_err),
        other => Err(FieldError::new(
            "problem.map.name",
            format!("{} is not available on continuous kernels", other.name()),
        )),
    }
}

struct Probe {
    d: usize,
}

impl ProblemVisitor for Probe {
    type Output = Result<(), FieldError>;
    fn visit<K>(self, kernel: &K, map: &dyn UpdateMap<K::State>) -> Self::Output
    where
        K: ControlledKernel,
        K::State: Send + Sync,
    {
        if map.dim() != self.d {
            return Err(FieldError::new("problem.map", format!("map dimension {} differs from {}", map.dim(), self.d)));
        }
        if let Some(p) = kernel.transition_matrix(&vec![0.0; self.d]) {
            p.map_err(kernel_err)?;
        }
        Ok(())
    }
}

/// Builds the problem once to surface parameter errors during validation.
pub fn check_problem(spec: &ProblemSpec, d: usize) -> Result<(), FieldError> {
    with_problem(spec, d, Probe { d })?
}
