//! On-disk formats: particle files, cohort manifests, grid volumes, model
//! parameter containers, and CSV traces. All text output uses LF endings and
//! full-precision decimal floats so reruns are byte-identical.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PointSet};
use crate::error::{Error, Result};
use crate::lds::{LdsParams, Scaler};
use crate::psm::ObjectiveBreakdown;
use crate::surfaces::{DomainKind, GridVolume, ShapeDomain};

fn fmt_f64(v: f64) -> String {
    // Shortest round-trippable decimal form.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// File name for the (subject, time) cell of a cohort.
pub fn particle_file_name(subject: usize, time: usize) -> String {
    format!("subject{subject}_time{time}.particles")
}

/// Writes one point set as plain text, one `x y z` triple per line.
pub fn write_particles(path: &Path, ps: &PointSet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in &ps.points {
        writeln!(out, "{} {} {}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.z))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_particles(path: &Path) -> Result<PointSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "{}:{}: expected 3 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let mut c = [0.0f64; 3];
        for (i, f) in fields.iter().enumerate() {
            c[i] = f.parse::<f64>().map_err(|e| {
                Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        points.push(Point3::new(c[0], c[1], c[2]));
    }
    if points.is_empty() {
        return Err(Error::Parse(format!("{}: no particles", path.display())));
    }
    Ok(PointSet::new(points))
}

/// Manifest describing the N x T particle file grid of a cohort, plus the
/// domain file for each cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub n_subjects: usize,
    pub n_timepoints: usize,
    /// Row-major (subject-major) relative paths, length N*T.
    pub particle_files: Vec<String>,
    pub domain_files: Vec<String>,
}

impl CohortManifest {
    pub fn cell(&self, subject: usize, time: usize) -> usize {
        subject * self.n_timepoints + time
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.n_subjects * self.n_timepoints;
        if cells == 0 {
            return Err(Error::InvalidSpec("manifest describes an empty cohort".into()));
        }
        if self.particle_files.len() != cells || self.domain_files.len() != cells {
            return Err(Error::InvalidSpec(format!(
                "manifest lists {} particle and {} domain files for {} cells",
                self.particle_files.len(),
                self.domain_files.len(),
                cells
            )));
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, manifest: &CohortManifest) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: CohortManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads every particle file referenced by a manifest. Relative paths resolve
/// against the manifest's directory.
pub fn load_cohort(manifest_path: &Path) -> Result<(Cohort, Vec<Vec<ShapeDomain>>)> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut shapes = Vec::with_capacity(manifest.n_subjects);
    let mut domains = Vec::with_capacity(manifest.n_subjects);
    for n in 0..manifest.n_subjects {
        let mut row = Vec::with_capacity(manifest.n_timepoints);
        let mut drow = Vec::with_capacity(manifest.n_timepoints);
        for t in 0..manifest.n_timepoints {
            let cell = manifest.cell(n, t);
            row.push(read_particles(&base.join(&manifest.particle_files[cell]))?);
            drow.push(read_domain(&base.join(&manifest.domain_files[cell]))?);
        }
        shapes.push(row);
        domains.push(drow);
    }
    Ok((Cohort::new(shapes)?, domains))
}

/// Writes a cohort and its domains under `dir`, returning the manifest path.
pub fn save_cohort(dir: &Path, pdm: &Cohort, domains: &[Vec<ShapeDomain>]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let n = pdm.n_subjects();
    let t_len = pdm.n_timepoints();
    let mut particle_files = Vec::with_capacity(n * t_len);
    let mut domain_files = Vec::with_capacity(n * t_len);
    for subject in 0..n {
        for time in 0..t_len {
            let pname = particle_file_name(subject, time);
            write_particles(&dir.join(&pname), pdm.get(subject, time)?)?;
            let dname = format!("subject{subject}_time{time}.domain.json");
            write_domain(&dir.join(&dname), &domains[subject][time])?;
            particle_files.push(pname);
            domain_files.push(dname);
        }
    }
    let manifest = CohortManifest {
        n_subjects: n,
        n_timepoints: t_len,
        particle_files,
        domain_files,
    };
    let path = dir.join("cohort.json");
    write_manifest(&path, &manifest)?;
    Ok(path)
}

pub fn write_domain(path: &Path, domain: &ShapeDomain) -> Result<()> {
    // Grid volumes go to a sidecar binary file; the JSON keeps geometry only.
    match &domain.kind {
        DomainKind::Grid(volume) => {
            let vol_path = path.with_extension("vol");
            write_grid_volume(&vol_path, volume)?;
            let stub = serde_json::json!({
                "kind": "grid",
                "volume_file": vol_path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned()),
                "surface_tol": domain.surface_tol,
            });
            fs::write(path, serde_json::to_string_pretty(&stub).unwrap() + "\n")?;
        }
        DomainKind::Ellipsoid { .. } => {
            let text =
                serde_json::to_string_pretty(domain).map_err(|e| Error::Parse(e.to_string()))?;
            fs::write(path, text + "\n")?;
        }
    }
    Ok(())
}

pub fn read_domain(path: &Path) -> Result<ShapeDomain> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if value.get("kind").and_then(|k| k.as_str()) == Some("grid") {
        let file = value
            .get("volume_file")
            .and_then(|f| f.as_str())
            .ok_or_else(|| Error::Parse(format!("{}: missing volume_file", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let volume = read_grid_volume(&base.join(file))?;
        let tol = value
            .get("surface_tol")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Parse(format!("{}: missing surface_tol", path.display())))?;
        let mut domain = ShapeDomain::from_grid(volume);
        domain.surface_tol = tol;
        Ok(domain)
    } else {
        serde_json::from_value(value).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Grid volume container: one text header line per field, then raw 32-bit
/// little-endian floats in x-fastest order.
///
/// ```text
/// gridvol 1
/// dims <nx> <ny> <nz>
/// spacing <sx> <sy> <sz>
/// origin <ox> <oy> <oz>
/// data
/// <nx*ny*nz little-endian f32 values>
/// ```
pub fn write_grid_volume(path: &Path, vol: &GridVolume) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "gridvol 1")?;
    writeln!(out, "dims {} {} {}", vol.dims[0], vol.dims[1], vol.dims[2])?;
    writeln!(
        out,
        "spacing {} {} {}",
        fmt_f64(vol.spacing.x),
        fmt_f64(vol.spacing.y),
        fmt_f64(vol.spacing.z)
    )?;
    writeln!(
        out,
        "origin {} {} {}",
        fmt_f64(vol.origin.x),
        fmt_f64(vol.origin.y),
        fmt_f64(vol.origin.z)
    )?;
    writeln!(out, "data")?;
    for v in &vol.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_grid_volume(path: &Path) -> Result<GridVolume> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    for _ in 0..5 {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        header.push(line.trim_end_matches('\n').to_string());
    }
    let parse_err = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    if header[0] != "gridvol 1" {
        return Err(parse_err("bad magic"));
    }
    let triple = |line: &str, tag: &str| -> Result<[f64; 3]> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != tag {
            return Err(parse_err(&format!("bad {tag} line")));
        }
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = fields[i + 1]
                .parse()
                .map_err(|_| parse_err(&format!("bad {tag} value")))?;
        }
        Ok(out)
    };
    let dims_f = triple(&header[1], "dims")?;
    let dims = [dims_f[0] as usize, dims_f[1] as usize, dims_f[2] as usize];
    let spacing = triple(&header[2], "spacing")?;
    let origin = triple(&header[3], "origin")?;
    if header[4] != "data" {
        return Err(parse_err("missing data marker"));
    }
    let count = dims[0] * dims[1] * dims[2];
    let mut raw = vec![0u8; count * 4];
    reader.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(GridVolume {
        dims,
        spacing: nalgebra::Vector3::new(spacing[0], spacing[1], spacing[2]),
        origin: Point3::new(origin[0], origin[1], origin[2]),
        values,
    })
}

/// Fitted model container: params plus the scaler that maps observations into
/// the fitting range, as one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelContainer {
    pub params: LdsParams,
    pub scaler: Scaler,
}

pub fn write_model(path: &Path, model: &ModelContainer) -> Result<()> {
    let text = serde_json::to_string(model).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelContainer> {
    let text = fs::read_to_string(path)?;
    let model: ModelContainer =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    model.params.validate()?;
    Ok(model)
}

/// Optimizer trace as CSV, one row per iteration.
pub fn write_trace_csv(path: &Path, trace: &[ObjectiveBreakdown]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "iteration,alpha,total,inter_entropy,intra_entropy,sampling_entropy,step"
    )?;
    for row in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.iteration,
            fmt_f64(row.alpha),
            fmt_f64(row.total),
            fmt_f64(row.inter_subject_entropy_sum),
            fmt_f64(row.intra_subject_entropy_sum),
            fmt_f64(row.sampling_entropy_sum),
            fmt_f64(row.step)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Log-likelihood trace as CSV: iteration, loglik.
pub fn write_loglik_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "iteration,loglik")?;
    for (i, v) in trace.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, fmt_f64(*v))?;
    }
    out.flush()?;
    Ok(())
}

/// Long-format metric rows: metric, t, value. `t` is empty for pooled rows.
pub fn write_metrics_csv(path: &Path, reports: &[crate::eval::MetricsReport]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "metric,fold,mask_fraction,t,value")?;
    for rep in reports {
        let metric = match rep.metric_kind {
            crate::eval::MetricKind::FullGeneralization => "full_generalization",
            crate::eval::MetricKind::PartialReconstruction => "partial_reconstruction",
            crate::eval::MetricKind::Specificity => "specificity",
        };
        let fold = rep.fold_id.map(|f| f.to_string()).unwrap_or_default();
        let frac = rep.mask_fraction.map(fmt_f64).unwrap_or_default();
        for (t, v) in rep.per_timepoint_rmse.iter().enumerate() {
            if let Some(v) = v {
                writeln!(out, "{metric},{fold},{frac},{t},{}", fmt_f64(*v))?;
            }
        }
        if let Some(v) = rep.overall_rmse {
            writeln!(out, "{metric},{fold},{frac},,{}", fmt_f64(v))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use tempfile::tempdir;

    #[test]
    fn particle_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.particles");
        let ps = PointSet::new(vec![
            Point3::new(1.5, -2.25, 0.0),
            Point3::new(1e-12, 3.0, -7.5e3),
        ]);
        write_particles(&path, &ps).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains('\r'));
        let back = read_particles(&path).unwrap();
        assert_eq!(back.points, ps.points);
    }

    #[test]
    fn particle_parse_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.particles");
        fs::write(&path, "1.0 2.0\n").unwrap();
        assert!(matches!(read_particles(&path), Err(Error::Parse(_))));
        fs::write(&path, "1.0 2.0 zebra\n").unwrap();
        assert!(matches!(read_particles(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn grid_volume_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let vol = GridVolume {
            dims: [3, 2, 2],
            spacing: Vector3::new(0.5, 1.0, 2.0),
            origin: Point3::new(-1.0, 0.0, 1.0),
            values: (0..12).map(|i| i as f32 * 0.25 - 1.0).collect(),
        };
        write_grid_volume(&path, &vol).unwrap();
        let back = read_grid_volume(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.spacing, vol.spacing);
        assert_eq!(back.origin, vol.origin);
        assert_eq!(back.values, vol.values);
    }

    #[test]
    fn domain_round_trip_ellipsoid_and_grid() {
        let dir = tempdir().unwrap();
        let ell = ShapeDomain::ellipsoid(Point3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let p1 = dir.path().join("e.domain.json");
        write_domain(&p1, &ell).unwrap();
        let back = read_domain(&p1).unwrap();
        assert_eq!(back.surface_tol, ell.surface_tol);
        let q = Point3::new(1.7, 0.4, -0.2);
        let (d0, _) = sdf_pair(&ell, &q);
        let (d1, _) = sdf_pair(&back, &q);
        assert!((d0 - d1).abs() < 1e-12);

        let (lo, hi) = ell.bounding_box();
        let grid = ShapeDomain::sample_to_grid(&ell, lo, hi, 0.5).unwrap();
        let p2 = dir.path().join("g.domain.json");
        write_domain(&p2, &grid).unwrap();
        let back = read_domain(&p2).unwrap();
        let (d0, _) = sdf_pair(&grid, &q);
        let (d1, _) = sdf_pair(&back, &q);
        assert!((d0 - d1).abs() < 1e-12);
    }

    fn sdf_pair(d: &ShapeDomain, p: &Point3<f64>) -> (f64, Vector3<f64>) {
        crate::surfaces::sdf_eval(d, p).unwrap()
    }

    #[test]
    fn cohort_save_load_round_trip() {
        let dir = tempdir().unwrap();
        let ps = |s: f64| {
            PointSet::new(vec![Point3::new(s, 0.0, 0.0), Point3::new(0.0, s, 0.0)])
        };
        let pdm = Cohort::new(vec![vec![ps(1.0), ps(2.0)], vec![ps(3.0), ps(4.0)]]).unwrap();
        let dom = ShapeDomain::sphere(Point3::origin(), 5.0);
        let domains = vec![vec![dom.clone(), dom.clone()], vec![dom.clone(), dom.clone()]];
        let manifest = save_cohort(dir.path(), &pdm, &domains).unwrap();
        let (back, back_domains) = load_cohort(&manifest).unwrap();
        assert_eq!(back.n_subjects(), 2);
        assert_eq!(back.n_timepoints(), 2);
        assert_eq!(back_domains.len(), 2);
        for n in 0..2 {
            for t in 0..2 {
                assert_eq!(back.get(n, t).unwrap().points, pdm.get(n, t).unwrap().points);
            }
        }
    }

    #[test]
    fn trace_csv_header_and_rows() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let row = ObjectiveBreakdown {
            iteration: 3,
            alpha: 10.0,
            total: -1.5,
            inter_subject_entropy_sum: 1.0,
            intra_subject_entropy_sum: 2.0,
            sampling_entropy_sum: 4.5,
            step: 0.05,
            n_particles: 8,
        };
        write_trace_csv(&path, &[row]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,alpha,total,inter_entropy,intra_entropy,sampling_entropy,step"
        );
        assert_eq!(lines.next().unwrap(), "3,10.0,-1.5,1.0,2.0,4.5,0.05");
    }

    #[test]
    fn loglik_csv_row_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ll.csv");
        write_loglik_csv(&path, &[-5.0, -4.0, -3.5]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
    }
}
