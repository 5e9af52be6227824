use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ptyparam::fields::{load_ptyf, write_ptyf};
use ptyparam::fisher_crlb::{crlb as crlb_report, fisher_dipoles, fisher_rect, CrlbReport};
use ptyparam::fit::FitResult;
use ptyparam::forward_dipole::{calibrate_a_in, simulate_dark_field, DarkFieldSetup, DipoleScene};
use ptyparam::forward_rect::{
    bandlimited_rect_object, calibrate_probe_scale, simulate_ptycho, PtychoSetup, RectParams, RECT_PARAM_NAMES,
};
use ptyparam::montecarlo::{
    fit_dipoles_to_estimate, fit_rect_to_estimate, run_campaign, sample_measurements, DipoleExperiment, Experiment,
    McReport, RectExperiment, TrialPlan,
};
use ptyparam::recon::{fourier_pty_reconstruct, pie_reconstruct};
use ptyparam::{ComplexField, RealField};

use crate::config::{ExperimentConfig, Scene};
use crate::{write_atomic, CliError};

pub const MANIFEST: &str = "manifest.csv";
pub const SIMULATION: &str = "simulation.csv";
pub const ESTIMATE: &str = "estimate.ptyf";
pub const RECON: &str = "recon.csv";
pub const RECON_TRACE: &str = "recon_trace.csv";
pub const FIT: &str = "fit.csv";
pub const CRLB: &str = "crlb.csv";
pub const FISHER: &str = "fisher.csv";
pub const MC: &str = "mc.csv";

const MEASUREMENT_DIR: &str = "measurements";

fn out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `output` in the config".into()))
}

/// Geometry and truth of the configured experiment, in wavelength units.
enum Built {
    Dipole {
        setup: DarkFieldSetup,
        scene: DipoleScene,
        count: usize,
    },
    Rect {
        setup: PtychoSetup,
        truth: RectParams,
        guess: Option<RectParams>,
    },
}

fn build(cfg: &ExperimentConfig) -> Result<Built, CliError> {
    let wl = cfg.wavelength_nm();
    match &cfg.scene {
        Scene::Dipole { geometry, scene } => Ok(Built::Dipole {
            setup: geometry.setup()?,
            scene: scene.scene(wl, geometry.z())?,
            count: scene.count(),
        }),
        Scene::Rect { geometry, scene } => Ok(Built::Rect {
            setup: geometry.setup()?,
            truth: scene.truth.params(wl)?,
            guess: scene.guess.map(|g| g.params(wl)).transpose()?,
        }),
    }
}

fn save_field(path: &Path, f: &ComplexField) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_ptyf(&mut buf, f)?;
    write_atomic(path, &buf)
}

fn load_field(path: &Path) -> Result<ComplexField, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!("{} not found", path.display())));
    }
    Ok(load_ptyf(path)?)
}

/// Reads a two-column `key,value` file.
fn read_key_values(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::MissingInput(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn lookup_f64(kv: &[(String, String)], key: &str, file: &Path) -> Result<f64, CliError> {
    kv.iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| CliError::MissingInput(format!("{} has no numeric `{key}` entry", file.display())))
}

pub fn simulate(config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(&cfg, out)?;
    let pn = cfg.noise.pn[0];
    let mut manifest = String::new();
    let mut sim = String::from("key,value\n");
    let expected = match build(&cfg)? {
        Built::Dipole { setup, mut scene, .. } => {
            // an empty scene scatters nothing whatever the flux
            if !scene.dipoles.is_empty() {
                scene.a_in = calibrate_a_in(&scene, &setup, 0, pn)?;
            }
            writeln!(sim, "application,dipole-darkfield").unwrap();
            writeln!(sim, "flux_scale,{:e}", scene.a_in).unwrap();
            manifest.push_str("view,file,kx,ky\n");
            for (j, t) in setup.tilts.iter().enumerate() {
                writeln!(manifest, "{j},{},{:e},{:e}", view_file(j), t[0], t[1]).unwrap();
            }
            simulate_dark_field(&scene, &setup)?
        }
        Built::Rect { setup, truth, .. } => {
            let s = calibrate_probe_scale(&setup.probe, pn)?;
            let setup = setup.with_probe(setup.probe.scaled(s));
            writeln!(sim, "application,rect-ptycho").unwrap();
            writeln!(sim, "flux_scale,{s:e}").unwrap();
            writeln!(sim, "overlap,{:e}", setup.plan.overlap).unwrap();
            if let Scene::Rect { geometry, .. } = &cfg.scene {
                let wl = cfg.wavelength_nm();
                if let Some(d) = geometry.distance {
                    writeln!(sim, "distance_nm,{:e}", d.in_nm(wl)).unwrap();
                }
                if let Some(p) = geometry.detector_pixel {
                    writeln!(sim, "detector_pixel_nm,{:e}", p.in_nm(wl)).unwrap();
                }
            }
            manifest.push_str("view,file,shift_x,shift_y\n");
            for j in 0..setup.views() {
                let sh = setup.shift(j);
                writeln!(manifest, "{j},{},{:e},{:e}", view_file(j), sh[0], sh[1]).unwrap();
            }
            let object = bandlimited_rect_object(&truth, &setup.object_grid)?;
            simulate_ptycho(&setup, &object)?
        }
    };
    writeln!(sim, "pn,{pn:e}").unwrap();
    writeln!(sim, "poisson,{}", cfg.noise.poisson).unwrap();
    writeln!(sim, "base_seed,{}", cfg.noise.base_seed).unwrap();
    let data = if cfg.noise.poisson {
        sample_measurements(&expected, cfg.noise.base_seed, 0)?
    } else {
        expected
    };
    for (j, img) in data.iter().enumerate() {
        save_field(&dir.join(MEASUREMENT_DIR).join(view_file(j)), &img.to_complex())?;
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())?;
    write_atomic(&dir.join(SIMULATION), sim.as_bytes())?;
    println!("wrote {} views to {}", data.len(), dir.join(MEASUREMENT_DIR).display());
    Ok(())
}

fn view_file(j: usize) -> String {
    format!("view_{j:04}.ptyf")
}

/// Measurements listed in the manifest of a run directory.
fn load_measurements(dir: &Path, views: usize) -> Result<Vec<RealField>, CliError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::MissingInput(format!("cannot read {}: {e}", path.display())))?;
    let files: Vec<String> = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').nth(1).unwrap_or("").to_string())
        .collect();
    if files.len() != views {
        return Err(CliError::Config(format!(
            "manifest lists {} views but the configured geometry has {views}",
            files.len()
        )));
    }
    files
        .iter()
        .map(|f| {
            let c = load_field(&dir.join(MEASUREMENT_DIR).join(f))?;
            if c.data.iter().any(|v| v.im != 0.0) {
                return Err(CliError::Config(format!("{f} is not an intensity image")));
            }
            Ok(RealField {
                grid: c.grid,
                data: c.data.iter().map(|v| v.re).collect(),
            })
        })
        .collect()
}

pub fn reconstruct(config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(&cfg, out)?;
    let sim_path = dir.join(SIMULATION);
    let scale = lookup_f64(&read_key_values(&sim_path)?, "flux_scale", &sim_path)?;
    let rc = cfg.recon_config();
    let r = match build(&cfg)? {
        Built::Dipole { setup, scene, .. } => {
            let data = load_measurements(&dir, setup.view_count())?;
            fourier_pty_reconstruct(&data, &setup, scene.z, scale, &rc)?
        }
        Built::Rect { setup, .. } => {
            let setup = setup.with_probe(setup.probe.scaled(scale));
            let data = load_measurements(&dir, setup.views())?;
            pie_reconstruct(&data, &setup, &rc)?
        }
    };
    save_field(&dir.join(ESTIMATE), &r.estimate)?;
    let summary = format!(
        "key,value\niterations,{}\ncost,{:e}\nconverged,{}\n",
        r.iterations, r.cost, r.converged
    );
    write_atomic(&dir.join(RECON), summary.as_bytes())?;
    let mut trace = String::from("sweep,cost\n");
    for (i, c) in r.trace.iter().enumerate() {
        writeln!(trace, "{},{c:e}", i + 1).unwrap();
    }
    write_atomic(&dir.join(RECON_TRACE), trace.as_bytes())?;
    println!("reconstruction: {} sweeps, cost {:e}", r.iterations, r.cost);
    Ok(())
}

fn fit_csv(names: &[String], truth: &[f64], f: &FitResult) -> String {
    let mut s = String::from("parameter,estimate,truth,active\n");
    for (i, n) in names.iter().enumerate() {
        writeln!(s, "{n},{:e},{:e},{}", f.theta[i], truth[i], f.active[i]).unwrap();
    }
    writeln!(s, "cost,{:e},,", f.cost).unwrap();
    writeln!(s, "iterations,{},,", f.iterations).unwrap();
    writeln!(s, "converged,{},,", f.converged).unwrap();
    s
}

pub fn fit(config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(&cfg, out)?;
    let sim_path = dir.join(SIMULATION);
    let scale = lookup_f64(&read_key_values(&sim_path)?, "flux_scale", &sim_path)?;
    let estimate = load_field(&dir.join(ESTIMATE))?;
    let opts = cfg.fit_options();
    let (names, truth, f) = match build(&cfg)? {
        Built::Dipole { setup, scene, count } => {
            let data = load_measurements(&dir, setup.view_count())?;
            let f = fit_dipoles_to_estimate(&estimate, &data, &setup, scene.z, scale, count, &opts)?;
            let mut names = scene.parameter_names();
            let mut truth = scene.theta();
            names.truncate(3 * count);
            truth.truncate(3 * count);
            (names, truth, f)
        }
        Built::Rect { setup, truth, guess } => {
            let setup = setup.with_probe(setup.probe.scaled(scale));
            let f = fit_rect_to_estimate(estimate, &setup, guess.as_ref(), &opts)?;
            let names = RECT_PARAM_NAMES.iter().map(|s| s.to_string()).collect();
            (names, truth.theta().to_vec(), f)
        }
    };
    let csv = fit_csv(&names, &truth, &f);
    write_atomic(&dir.join(FIT), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// One evaluation point of a sweep.
struct SweepPoint {
    sweep: &'static str,
    value: f64,
    pn: f64,
    built: Built,
}

fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>, CliError> {
    let mut pts = Vec::new();
    for &pn in &cfg.noise.pn {
        pts.push(SweepPoint {
            sweep: "pn",
            value: pn,
            pn,
            built: build(cfg)?,
        });
        for &m in &cfg.sweep.alpha2_factors {
            let mut built = build(cfg)?;
            if let Built::Dipole { scene, .. } = &mut built {
                scene.dipoles[1].alpha *= m;
            }
            pts.push(SweepPoint {
                sweep: "alpha2",
                value: m,
                pn,
                built,
            });
        }
        for b in &cfg.sweep.b1 {
            let mut built = build(cfg)?;
            let b = b.in_wavelengths(cfg.wavelength_nm());
            if let Built::Rect { truth, .. } = &mut built {
                truth.b = b;
            }
            pts.push(SweepPoint {
                sweep: "b1",
                value: b,
                pn,
                built,
            });
        }
    }
    Ok(pts)
}

fn crlb_at(built: &Built, pn: f64) -> Result<(CrlbReport, ptyparam::fisher_crlb::FisherMatrix), CliError> {
    let m = match built {
        Built::Dipole { setup, scene, .. } => {
            let mut s = scene.clone();
            s.a_in = calibrate_a_in(&s, setup, 0, pn)?;
            fisher_dipoles(&s, setup)?
        }
        Built::Rect { setup, truth, .. } => {
            let c = calibrate_probe_scale(&setup.probe, pn)?;
            fisher_rect(truth, &setup.with_probe(setup.probe.scaled(c)))?
        }
    };
    Ok((crlb_report(&m, pn)?, m))
}

pub fn crlb(config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(&cfg, out)?;
    let mut s = String::from("sweep,sweep_value,pn,parameter,crlb,condition,pseudo_inverse\n");
    let mut first = None;
    for p in sweep_points(&cfg)? {
        let (r, m) = crlb_at(&p.built, p.pn)?;
        for (n, v) in r.names.iter().zip(&r.values) {
            writeln!(
                s,
                "{},{:e},{:e},{n},{v:e},{:e},{}",
                p.sweep, p.value, p.pn, r.condition, r.pseudo_inverse
            )
            .unwrap();
        }
        first.get_or_insert(m);
    }
    if let Some(m) = first {
        write_atomic(&dir.join(FISHER), m.to_csv().as_bytes())?;
    }
    write_atomic(&dir.join(CRLB), s.as_bytes())?;
    print!("{s}");
    Ok(())
}

pub fn montecarlo(config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(&cfg, out)?;
    let mut s = String::from("sweep,sweep_value,pn,parameter,truth,mean,variance,bias2,crlb,trials_used,failures\n");
    for (k, p) in sweep_points(&cfg)?.into_iter().enumerate() {
        let experiment = match p.built {
            Built::Dipole { setup, scene, .. } => Experiment::Dipole(DipoleExperiment {
                truth: scene,
                setup,
                recon: cfg.recon_config(),
                fit: cfg.fit_options(),
            }),
            Built::Rect { setup, truth, guess } => Experiment::Rect(RectExperiment {
                truth,
                setup,
                guess,
                recon: cfg.recon_config(),
                fit: cfg.fit_options(),
            }),
        };
        let names = experiment.parameter_names();
        let report: McReport = run_campaign(&TrialPlan {
            base_seed: cfg.noise.base_seed,
            trials: cfg.noise.trials,
            pn: p.pn,
            experiment,
            track: vec![],
            bypass_noise: false,
        })?;
        for (i, n) in report.names.iter().enumerate() {
            writeln!(
                s,
                "{},{:e},{:e},{n},{:e},{:e},{:e},{:e},{:e},{},{}",
                p.sweep,
                p.value,
                p.pn,
                report.truth[i],
                report.mean[i],
                report.variance[i],
                report.bias2[i],
                report.crlb[i],
                report.trials_used,
                report.failures
            )
            .unwrap();
        }
        write_atomic(
            &dir.join(format!("mc_estimates_{k:03}.csv")),
            report.estimates_csv(&names).as_bytes(),
        )?;
        eprintln!(
            "{} = {:e} at PN {:e}: {} trials used, {} failed",
            p.sweep, p.value, p.pn, report.trials_used, report.failures
        );
    }
    write_atomic(&dir.join(MC), s.as_bytes())?;
    print!("{s}");
    Ok(())
}
