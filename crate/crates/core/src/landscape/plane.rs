use std::io::Write;

use rayon::prelude::*;

use super::Objective;
use crate::error::{Error, Result};

/// Loss surface over the plane through three points.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGrid {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    /// Row-major: `losses[j * nx + i]` sits at `(x0 + i·dx, y0 + j·dy)`.
    pub losses: Vec<f64>,
    /// Plane coordinates of the three points.
    pub points: [(f64, f64); 3],
    /// Plane coordinates of the three points' mean.
    pub average: (f64, f64),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl PlaneGrid {
    /// `origin + x·u + y·v`.
    pub fn point(&self, x: f64, y: f64) -> Vec<f64> {
        self.origin.iter().zip(&self.u).zip(&self.v).map(|((o, a), b)| o + x * a + y * b).collect()
    }

    pub fn project(&self, w: &[f64]) -> (f64, f64) {
        let d: Vec<f64> = w.iter().zip(&self.origin).map(|(a, b)| a - b).collect();
        (dot(&d, &self.u), dot(&d, &self.v))
    }

    /// Grid point with the lowest loss.
    pub fn argmin(&self) -> (f64, f64) {
        let (k, _) = self
            .losses
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, &l)| if l < best.1 { (k, l) } else { best });
        (self.x0 + (k % self.nx) as f64 * self.dx, self.y0 + (k / self.nx) as f64 * self.dy)
    }

    /// Header line `nx,ny,x0,y0,dx,dy`, its values, then one line per grid row.
    pub fn write_grid<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "nx,ny,x0,y0,dx,dy")?;
        writeln!(out, "{},{},{},{},{},{}", self.nx, self.ny, self.x0, self.y0, self.dx, self.dy)?;
        for row in self.losses.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn write_points<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "name,x,y")?;
        for (i, (x, y)) in self.points.iter().enumerate() {
            writeln!(out, "P{},{x},{y}", i + 1)?;
        }
        writeln!(out, "WA,{},{}", self.average.0, self.average.1)?;
        Ok(())
    }
}

/// Samples `objective` on a `resolution × resolution` grid over the plane
/// through `w1`, `w2`, `w3`. The grid covers the bounding box of the three
/// points, widened on every side by `margin` times its extent.
pub fn plane_surface(
    objective: &dyn Objective,
    w1: &[f64],
    w2: &[f64],
    w3: &[f64],
    resolution: usize,
    margin: f64,
) -> Result<PlaneGrid> {
    let d = objective.dim();
    if w1.len() != d || w2.len() != d || w3.len() != d {
        return Err(Error::shape("plane_surface", &[d], &[w1.len(), w2.len(), w3.len()]));
    }
    if resolution < 2 {
        return Err(Error::invalid("plane resolution must be at least 2"));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid("plane margin must be non-negative"));
    }
    let e1: Vec<f64> = w2.iter().zip(w1).map(|(a, b)| a - b).collect();
    let e2: Vec<f64> = w3.iter().zip(w1).map(|(a, b)| a - b).collect();
    let len1 = norm(&e1);
    if len1 < 1e-9 {
        return Err(Error::invalid("degenerate plane: first two points coincide"));
    }
    let u: Vec<f64> = e1.iter().map(|x| x / len1).collect();
    let along = dot(&e2, &u);
    let resid: Vec<f64> = e2.iter().zip(&u).map(|(x, y)| x - along * y).collect();
    let rlen = norm(&resid);
    if rlen < 1e-9 * norm(&e2).max(1.0) {
        return Err(Error::invalid("degenerate plane: points are collinear"));
    }
    let v: Vec<f64> = resid.iter().map(|x| x / rlen).collect();

    let points = [(0.0, 0.0), (len1, 0.0), (along, dot(&e2, &v))];
    let mean: Vec<f64> = (0..d).map(|i| (w1[i] + w2[i] + w3[i]) / 3.0).collect();

    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let (wx, wy) = (xmax - xmin, ymax - ymin);
    let (x0, y0) = (xmin - margin * wx, ymin - margin * wy);
    let dx = wx * (1.0 + 2.0 * margin) / (resolution - 1) as f64;
    let dy = wy * (1.0 + 2.0 * margin) / (resolution - 1) as f64;

    let mut grid = PlaneGrid {
        origin: w1.to_vec(),
        u,
        v,
        nx: resolution,
        ny: resolution,
        x0,
        y0,
        dx,
        dy,
        losses: Vec::new(),
        points,
        average: (0.0, 0.0),
    };
    grid.average = grid.project(&mean);
    let losses: Vec<f64> = (0..resolution * resolution)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % resolution, k / resolution);
            objective.loss(&grid.point(x0 + i as f64 * dx, y0 + j as f64 * dy))
        })
        .collect::<Result<_>>()?;
    grid.losses = losses;
    Ok(grid)
}
