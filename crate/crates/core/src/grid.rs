//! Depth discretisation and the small value types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid over soil depth, in metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthGrid {
    nz: usize,
    z_min: f64,
    z_max: f64,
    dz: f64,
    nodes: Vec<f64>,
}

/// Builds a uniform depth grid with `nz` nodes on `[z_min, z_max]`.
pub fn make_grid(nz: usize, z_min: f64, z_max: f64) -> Result<DepthGrid> {
    DepthGrid::new(nz, z_min, z_max)
}

impl DepthGrid {
    pub fn new(nz: usize, z_min: f64, z_max: f64) -> Result<Self> {
        if nz < 3 {
            return Err(Error::invalid(format!("grid needs at least 3 nodes, got {nz}")));
        }
        if !(z_min.is_finite() && z_max.is_finite()) || z_max <= z_min {
            return Err(Error::invalid(format!(
                "grid bounds must satisfy z_min < z_max, got [{z_min}, {z_max}]"
            )));
        }
        let dz = (z_max - z_min) / (nz - 1) as f64;
        let mut nodes: Vec<f64> = (0..nz).map(|i| z_min + i as f64 * dz).collect();
        nodes[nz - 1] = z_max;
        Ok(DepthGrid {
            nz,
            z_min,
            z_max,
            dz,
            nodes,
        })
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Trapezoidal integral of a nodal profile over the column.
    ///
    /// This is the quantity the reflected-ghost Laplacian conserves exactly:
    /// the end nodes carry half weight.
    pub fn mass(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.nz);
        let interior: f64 = values[1..self.nz - 1].iter().sum();
        self.dz * (interior + 0.5 * (values[0] + values[self.nz - 1]))
    }
}

/// SOC concentration at every grid node at a single time (years).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocProfile {
    pub values: Vec<f64>,
    pub time: f64,
}

impl SocProfile {
    pub fn new(values: Vec<f64>, time: f64) -> Self {
        SocProfile { values, time }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Soil-health drivers at one (depth, time) point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverSample {
    pub ph: f64,
    pub cec: f64,
    pub clay: f64,
}

/// Constant transport coefficients: diffusion in m^2/yr, advection in m/yr.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportParams {
    pub diffusion_d: f64,
    pub advection_v: f64,
}

impl TransportParams {
    pub fn new(diffusion_d: f64, advection_v: f64) -> Result<Self> {
        if !(diffusion_d.is_finite() && diffusion_d >= 0.0) {
            return Err(Error::invalid(format!(
                "diffusion must be finite and non-negative, got {diffusion_d}"
            )));
        }
        if !advection_v.is_finite() {
            return Err(Error::invalid("advection velocity must be finite"));
        }
        Ok(TransportParams {
            diffusion_d,
            advection_v,
        })
    }

    pub fn none() -> Self {
        TransportParams {
            diffusion_d: 0.0,
            advection_v: 0.0,
        }
    }
}

impl Default for TransportParams {
    fn default() -> Self {
        TransportParams {
            diffusion_d: 1e-3,
            advection_v: 1e-3,
        }
    }
}
