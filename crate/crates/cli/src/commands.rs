use std::collections::BTreeMap;

use fsh_core::integrator::{event_log, flow_filippov, write_csv, IntegratorOptions};
use fsh_core::shilnikov::{
    build_structure, calibrate_radius, code_itinerary, cylinders, entropy_of, find_periodic, locate_cylinder,
    path_word, recorded_radius, verify_shilnikov, FilippovReturnMap, ItineraryWord, PeriodicRow, PieceRow, ReturnMap,
    ReturnOptions, ReturnRow, ShilnikovReport, Structure, VerifyOptions,
};
use fsh_core::{
    build_model, classify, Dd, Error, PiecewiseSystem, Real, ShilnikovParams, SystemSpec, Tolerances, Vec3,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::{f, list, to_json, Artifacts};
use crate::{Command, Failure, Global, SectionArgs, SweepTask};

pub struct Run {
    pub system: Option<SystemSpec>,
    pub options: Value,
}

impl Default for Run {
    fn default() -> Self {
        Run { system: None, options: json!({}) }
    }
}

pub struct Ctx {
    pub spec: SystemSpec,
    pub sys: PiecewiseSystem,
    pub tol: Tolerances,
    pub integ: IntegratorOptions,
    pub seed: u64,
}

impl Ctx {
    fn params(&self) -> Option<ShilnikovParams> {
        self.spec.params()
    }

    fn returns(&self) -> ReturnOptions {
        let mut r = ReturnOptions { tol: self.tol, ..ReturnOptions::default() };
        r.integrator.rtol = self.integ.rtol;
        r.integrator.atol = self.integ.atol;
        r
    }
}

fn config(msg: impl Into<String>) -> Failure {
    Failure::Config(Error::Config(msg.into()))
}

fn positive(name: &str, v: f64) -> Result<f64, Failure> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(config(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn setup(g: &Global) -> Result<Ctx, Failure> {
    let spec = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
            SystemSpec::from_json(&text)?
        }
        None => SystemSpec::Shilnikov { alpha: g.alpha.unwrap_or(1.0), beta: g.beta.unwrap_or(1.0) },
    };
    let sys = spec.build()?;
    let mut tol = Tolerances::default();
    let mut integ = IntegratorOptions::default();
    if let Some(v) = g.h_tol {
        tol.h_tol = positive("--h-tol", v)?;
    }
    if let Some(v) = g.rtol {
        integ.rtol = positive("--rtol", v)?;
    }
    if let Some(v) = g.atol {
        integ.atol = positive("--atol", v)?;
    }
    // a second build in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(g.jobs).build_global();
    Ok(Ctx { spec, sys, tol, integ, seed: g.seed })
}

fn value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable value")
}

fn default_guess(p: ShilnikovParams) -> [f64; 3] {
    [1.4 * p.beta, 1.1 * p.c(), 0.0]
}

fn section_map(ctx: &Ctx, sa: &SectionArgs, run: &mut Run) -> Result<FilippovReturnMap<PiecewiseSystem>, Failure> {
    let guess = match (sa.guess, ctx.params()) {
        (Some(g), _) => g,
        (None, Some(p)) => default_guess(p),
        (None, None) => return Err(config("--guess is required for custom systems")),
    };
    if sa.samples < 2 || sa.resolution < 2 {
        return Err(config("--samples and --resolution must be at least 2"));
    }
    if !(sa.tmax.is_finite() && sa.tmax >= 0.0) {
        return Err(config("--tmax must be non-negative"));
    }
    let mut opts = ctx.returns();
    opts.t_max = sa.tmax;
    let r = match (sa.r, ctx.params()) {
        (Some(r), _) => positive("--r", r)?,
        (None, Some(p)) => recorded_radius(p),
        (None, None) => calibrate_radius(&ctx.sys, guess, 0.05, 200, sa.resolution, 6, &opts)?.ok_or_else(|| {
            Failure::Analysis(Error::DegenerateSection("no radius down to 0.05/64 gives an expanding map".into()))
        })?,
    };
    run.options = json!({
        "guess": guess,
        "r": r,
        "samples": sa.samples,
        "resolution": sa.resolution,
        "tmax": sa.tmax,
    });
    Ok(FilippovReturnMap::build(ctx.sys.clone(), guess, r, sa.samples, opts)?)
}

fn with_option(run: &mut Run, key: &str, v: Value) {
    if let Value::Object(m) = &mut run.options {
        m.insert(key.to_string(), v);
    }
}

fn word_cells(w: &ItineraryWord) -> [String; 2] {
    [list(&w.halves), list(&w.counts)]
}

pub fn dispatch(ctx: &Ctx, cmd: &Command, run: &mut Run, art: &mut Artifacts) -> Result<Value, Failure> {
    match cmd {
        Command::Classify { at } => {
            run.options = json!({ "at": at, "tolerances": ctx.tol });
            let rows = at
                .iter()
                .map(|p| Ok(json!({ "point": p, "class": classify(&ctx.sys, &Vec3::<f64>::from_f64(*p), &ctx.tol)? })))
                .collect::<Result<Vec<Value>, Error>>()?;
            Ok(json!({ "points": rows }))
        }
        Command::Flow { from, tmax, dense } => {
            positive("--tmax", *tmax)?;
            let opts = IntegratorOptions { dense_per_step: *dense, record_samples: true, ..ctx.integ };
            run.options =
                json!({ "from": from, "tmax": tmax, "dense": dense, "integrator": opts, "tolerances": ctx.tol });
            let traj = flow_filippov(&ctx.sys, &Vec3::<f64>::from_f64(*from), *tmax, &opts, &ctx.tol, &mut ())?;
            let mut csv = Vec::new();
            write_csv(&traj, &mut csv)?;
            art.write("trajectory.csv", &csv)?;
            let events = event_log(&traj);
            art.write("events.json", to_json(&events).as_bytes())?;
            let modes: Vec<&str> = traj.segments.iter().map(|s| s.mode.name()).collect();
            Ok(json!({
                "segments": traj.segments.len(),
                "modes": modes,
                "events": events,
                "final_event": events.last().map(|e| e.kind),
                "end_point": traj.end_point().map(|p| p.0),
            }))
        }
        Command::VerifyShilnikov { guess, radius } => {
            let guess = match (guess, ctx.params()) {
                (Some(g), _) => *g,
                (None, Some(p)) => default_guess(p),
                (None, None) => return Err(config("--guess is required for custom systems")),
            };
            let radius = match radius {
                Some(r) => positive("--radius", *r)?,
                None => ctx.params().map_or(0.05, recorded_radius),
            };
            let opts = VerifyOptions { radius, returns: ctx.returns(), ..VerifyOptions::default() };
            run.options = json!({ "guess": guess, "verify": opts });
            let rep = verify_shilnikov(&ctx.sys, guess, &opts)?;
            art.csv(
                "certificates.csv",
                &["name", "passed", "value"],
                rep.certificates.iter().map(|c| vec![c.name.clone(), c.passed.to_string(), f(c.value)]),
            )?;
            Ok(value(&rep))
        }
        Command::ReturnMap { section, scan } => {
            let map = section_map(ctx, section, run)?;
            with_option(run, "scan", json!(scan));
            let r = map.radius();
            let grid: Vec<f64> = (0..*scan).map(|i| -r + 2.0 * r * (i as f64 + 0.5) / *scan as f64).collect();
            let recs: Vec<_> = grid.par_iter().map(|&s| map.first_return(Dd::from(s))).collect();
            let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
            let rows: Vec<ReturnRow> = recs
                .iter()
                .filter_map(|r| match r {
                    Ok(rec) => Some(ReturnRow::from(rec)),
                    Err(e) => {
                        *failures.entry(e.kind()).or_default() += 1;
                        None
                    }
                })
                .collect();
            let pieces: Vec<PieceRow> = map.pieces(section.resolution)?.iter().map(PieceRow::from).collect();
            art.csv(
                "return_map.csv",
                &["s_in", "s_out", "eta0", "eta1", "half_in", "half_out", "t_return"],
                rows.iter().map(|r| {
                    vec![
                        f(r.s_in),
                        f(r.s_out),
                        r.eta0.to_string(),
                        r.eta1.to_string(),
                        r.half_in.to_string(),
                        r.half_out.to_string(),
                        f(r.t_return),
                    ]
                }),
            )?;
            art.csv(
                "pieces.csv",
                &["lo", "hi", "width", "half_in", "half_out", "eta0", "eta1", "excursions", "increasing"],
                pieces.iter().map(|p| {
                    vec![
                        f(p.lo),
                        f(p.hi),
                        f(p.width),
                        p.half_in.to_string(),
                        p.half_out.to_string(),
                        p.eta0.to_string(),
                        p.eta1.to_string(),
                        p.excursions.to_string(),
                        p.increasing.to_string(),
                    ]
                }),
            )?;
            Ok(json!({ "scan": scan, "returned": rows.len(), "failures": failures, "pieces": pieces }))
        }
        Command::Itinerary { section, s, random, depth } => {
            let map = section_map(ctx, section, run)?;
            with_option(run, "depth", json!(depth));
            with_option(run, "random", json!(random));
            with_option(run, "seed", json!(ctx.seed));
            let r = map.radius();
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let mut points = s.clone();
            points.extend((0..*random).map(|_| rng.gen_range(-r..r)));
            if points.is_empty() {
                return Err(config("give --s or --random"));
            }
            if let Some(bad) = points.iter().find(|p| !(p.abs() <= r)) {
                return Err(config(format!("section coordinate {bad} is outside [-{r}, {r}]")));
            }
            let words: Vec<_> = points.par_iter().map(|&p| code_itinerary(&map, Dd::from(p), *depth)).collect();
            let rows: Vec<Value> = points
                .iter()
                .zip(&words)
                .map(|(p, w)| match w {
                    Ok(w) => json!({ "s": p, "word": w, "error": null }),
                    Err(e) => json!({ "s": p, "word": null, "error": e.kind() }),
                })
                .collect();
            art.csv(
                "itineraries.csv",
                &["s", "halves", "counts", "error"],
                points.iter().zip(&words).map(|(p, w)| match w {
                    Ok(w) => {
                        let [h, c] = word_cells(w);
                        vec![f(*p), h, c, String::new()]
                    }
                    Err(e) => vec![f(*p), String::new(), String::new(), e.kind().to_string()],
                }),
            )?;
            Ok(json!({ "points": rows }))
        }
        Command::Cylinder { section, halves, counts, depth } => {
            let map = section_map(ctx, section, run)?;
            let st = build_structure(&map, section.resolution)?;
            let rows: Vec<(ItineraryWord, (Dd, Dd))> = match depth {
                Some(m) => {
                    if *m == 0 {
                        return Err(config("--depth must be at least 1"));
                    }
                    with_option(run, "depth", json!(m));
                    cylinders(&map, &st, *m)?.into_iter().map(|(path, iv)| (path_word(&st, &path), iv)).collect()
                }
                None => {
                    if halves.is_empty() || halves.len() != counts.len() + 1 {
                        return Err(config("give --depth, or --halves with one more entry than --counts"));
                    }
                    let word = ItineraryWord { halves: halves.clone(), counts: counts.clone() };
                    with_option(run, "word", json!(word));
                    locate_cylinder(&map, &st, &word)?.into_iter().map(|iv| (word.clone(), iv)).collect()
                }
            };
            art.csv(
                "cylinders.csv",
                &["halves", "counts", "lo", "hi", "width"],
                rows.iter().map(|(w, (lo, hi))| {
                    let [h, c] = word_cells(w);
                    vec![h, c, f(lo.to_f64()), f(hi.to_f64()), f((*hi - *lo).to_f64())]
                }),
            )?;
            let out: Vec<Value> = rows
                .iter()
                .map(|(w, (lo, hi))| json!({ "word": w, "lo": lo.to_f64(), "hi": hi.to_f64(), "width": (*hi - *lo).to_f64() }))
                .collect();
            Ok(json!({ "pieces": st.pieces.len(), "markov": st.markov, "cylinders": out }))
        }
        Command::Periodic { section, period } => {
            let map = section_map(ctx, section, run)?;
            with_option(run, "period", json!(period));
            if *period == 0 {
                return Err(config("--period must be at least 1"));
            }
            let st = build_structure(&map, section.resolution)?;
            let rows = periodic_rows(&map, &st, *period)?;
            art.csv(
                "periodic.csv",
                &["s", "period", "halves", "counts", "multiplier", "residual", "cylinder_width"],
                rows.iter().map(|p| {
                    let [h, c] = word_cells(&p.word);
                    vec![f(p.s), p.period.to_string(), h, c, f(p.multiplier), f(p.residual), f(p.cylinder_width)]
                }),
            )?;
            Ok(json!({ "period": period, "count": rows.len(), "points": rows }))
        }
        Command::Entropy { section, depth, scan } => {
            let mut section = section.clone();
            section.resolution = scan.unwrap_or(section.resolution);
            let map = section_map(ctx, &section, run)?;
            with_option(run, "depth", json!(depth));
            if *depth == 0 {
                return Err(config("--depth must be at least 1"));
            }
            let st = build_structure(&map, section.resolution)?;
            let table: Vec<_> = (1..=*depth).map(|m| entropy_of(&st, m)).collect();
            art.csv(
                "entropy.csv",
                &["depth", "words", "saturated", "entropy", "k", "shift_entropy"],
                table.iter().map(|e| {
                    vec![
                        e.depth.to_string(),
                        f(e.words),
                        e.saturated.to_string(),
                        f(e.entropy),
                        e.k.to_string(),
                        f(e.shift_entropy),
                    ]
                }),
            )?;
            Ok(json!({ "pieces": st.pieces.len(), "markov": st.markov, "table": table }))
        }
        Command::Sweep { task, alphas, betas, period, resolution } => {
            if !matches!(ctx.spec, SystemSpec::Shilnikov { .. }) || alphas.is_empty() || betas.is_empty() {
                return Err(config("sweep runs over the builtin model and needs --alphas and --betas"));
            }
            for v in alphas.iter().chain(betas) {
                positive("sweep parameter", *v)?;
            }
            if *period == 0 || *resolution < 2 {
                return Err(config("--period must be at least 1 and --resolution at least 2"));
            }
            run.system = None;
            run.options = json!({
                "task": match task { SweepTask::Verify => "verify", SweepTask::Periodic => "periodic" },
                "alphas": alphas,
                "betas": betas,
                "period": period,
                "resolution": resolution,
            });
            let mut grid: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect();
            grid.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
            grid.dedup();
            let items: Vec<SweepItem> =
                grid.par_iter().map(|&(a, b)| sweep_item(ctx, *task, a, b, *period, *resolution)).collect();
            art.csv(
                "sweep.csv",
                &["alpha", "beta", "status", "passed", "t0", "count"],
                items.iter().map(|i| {
                    vec![
                        f(i.alpha),
                        f(i.beta),
                        i.error.unwrap_or("ok").to_string(),
                        i.report.as_ref().map_or(String::new(), |r| r.passed.to_string()),
                        i.report.as_ref().and_then(|r| r.t0).map_or(String::new(), f),
                        i.points.as_ref().map_or(String::new(), |p| p.len().to_string()),
                    ]
                }),
            )?;
            Ok(json!({ "items": items }))
        }
    }
}

fn periodic_rows<M: ReturnMap>(map: &M, st: &Structure, m: usize) -> Result<Vec<PeriodicRow>, Error> {
    Ok(find_periodic(map, st, m)?.iter().map(PeriodicRow::from).collect())
}

#[derive(Serialize)]
struct SweepItem {
    alpha: f64,
    beta: f64,
    error: Option<&'static str>,
    report: Option<ShilnikovReport>,
    points: Option<Vec<PeriodicRow>>,
}

fn sweep_item(ctx: &Ctx, task: SweepTask, alpha: f64, beta: f64, period: usize, resolution: usize) -> SweepItem {
    let mut item = SweepItem { alpha, beta, error: None, report: None, points: None };
    let prm = match ShilnikovParams::new(alpha, beta) {
        Ok(p) => p,
        Err(e) => {
            item.error = Some(e.kind());
            return item;
        }
    };
    let sys = build_model(prm);
    let res = match task {
        SweepTask::Verify => {
            let opts =
                VerifyOptions { radius: recorded_radius(prm), returns: ctx.returns(), ..VerifyOptions::default() };
            verify_shilnikov(&sys, default_guess(prm), &opts).map(|r| item.report = Some(r))
        }
        SweepTask::Periodic => {
            FilippovReturnMap::build(sys, default_guess(prm), recorded_radius(prm), 401, ctx.returns())
                .and_then(|map| {
                    let st = build_structure(&map, resolution)?;
                    periodic_rows(&map, &st, period)
                })
                .map(|p| item.points = Some(p))
        }
    };
    if let Err(e) = res {
        item.error = Some(e.kind());
    }
    item
}
