//! The ten numbered acceptance criteria, evaluated in sequence on one
//! configuration. The `acceptance` test target and the CLI `all` command
//! both run this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corrector::{wellposedness_checks, WellPosednessPlan};
use crate::geometry::{shape_regularity_verdicts, DecayRule, HoleShape, PerforationField, Point, ShapeRegularityPlan};
use crate::grid::{classify_nodes, oracle_verdicts, CartesianGrid};
use crate::homogenize::{
    boundary_layer_verdict, convergence_study_with, dichotomy_verdicts, prepare_for, rate_verdicts, ConvergenceReport,
    Level, Rect, SourceTerm, StudyPlan,
};
use crate::poincare::{certify, check_box_constant, eps_scaling_study, rayleigh_min, Constraint};
use crate::{Criterion, Verdict};

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Bump-source study; the constant-source study reuses it with `f ≡ 1`.
    pub study: StudyPlan,
    pub box_hole: HoleShape,
    pub box_rect: Rect,
    pub box_n: usize,
    pub scaling_eps_inv: Vec<usize>,
    pub scaling_cells: usize,
    pub wellposedness: WellPosednessPlan,
    /// Field for the summability check of `|O_k Δ O_k^per|`.
    pub decay_field: PerforationField,
    pub regularity: ShapeRegularityPlan,
    pub seed: u64,
}

impl SuiteConfig {
    pub fn golden() -> Self {
        let center = Point::new(0.5, 0.5);
        let side = 0.3 * std::f64::consts::SQRT_2;
        let study = StudyPlan::golden(SourceTerm::default_bump());
        SuiteConfig {
            decay_field: PerforationField::periodic(study.field.pattern).with_decay(DecayRule {
                amplitude: 0.05,
                ratio: 0.5,
            }),
            study,
            box_hole: HoleShape::disk(center, 0.3),
            box_rect: Rect::new(0.5 - side / 2.0, 0.5 - side / 2.0, 0.5 + side / 2.0, 0.5 + side / 2.0),
            box_n: 256,
            scaling_eps_inv: vec![4, 8, 16],
            scaling_cells: 32,
            wellposedness: WellPosednessPlan::default(),
            regularity: ShapeRegularityPlan::default(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOutcome {
    pub criteria: Vec<Criterion>,
    /// `(file name, contents)` of the CSV reports produced on the way.
    pub artifacts: Vec<(String, String)>,
}

impl SuiteOutcome {
    pub fn pass(&self) -> bool {
        self.criteria.iter().all(Criterion::pass)
    }

    /// One `PASS|FAIL name measured expected` line per criterion.
    pub fn summary(&self) -> String {
        self.criteria.iter().map(|c| format!("{c}\n")).collect()
    }
}

/// Collects every criterion; `on_done` sees each one as soon as it is known.
pub fn run_suite(cfg: &SuiteConfig, mut on_done: impl FnMut(&Criterion)) -> SuiteOutcome {
    let mut artifacts = Vec::new();
    let mut out = Vec::new();
    let mut push = |c: Criterion| {
        on_done(&c);
        out.push(c);
    };

    match study_pair(&cfg.study) {
        Ok((bump, constant)) => {
            artifacts.push(("study.csv".to_string(), bump.to_csv()));
            artifacts.push(("study_constant_source.csv".to_string(), constant.to_csv()));
            let rates = rate_verdicts(&bump);
            push(Criterion::new(1, "energy_and_l2_rates", rates[..2].to_vec()));
            push(Criterion::new(2, "linf_rate", rates[2..].to_vec()));
            push(Criterion::new(
                3,
                "corrector_choice_dichotomy",
                dichotomy_verdicts(&bump),
            ));
            push(Criterion::new(
                4,
                "constant_source_rate",
                vec![boundary_layer_verdict(&constant)],
            ));
        }
        Err(e) => {
            let reason = format!("study_failed: {e}");
            push(Criterion::failed(1, "energy_and_l2_rates", &reason));
            push(Criterion::failed(2, "linf_rate", &reason));
            push(Criterion::failed(3, "corrector_choice_dichotomy", &reason));
            push(Criterion::failed(4, "constant_source_rate", &reason));
        }
    }

    push(match check_box_constant(&cfg.box_hole, cfg.box_rect, cfg.box_n) {
        Ok(b) => Criterion::new(5, "box_poincare_constant", vec![b.verdict("box_constant")]),
        Err(e) => Criterion::failed(5, "box_poincare_constant", &format!("box_check_failed: {e}")),
    });

    let plain = PerforationField::periodic(cfg.study.field.pattern);
    let mut scaling = Vec::new();
    for (name, file, field) in [
        ("periodic_spread", "scaling_periodic.csv", &plain),
        ("defect_spread", "scaling_defect.csv", &cfg.study.field),
    ] {
        match eps_scaling_study(
            field,
            cfg.study.omega,
            cfg.study.anchor,
            &cfg.scaling_eps_inv,
            cfg.scaling_cells,
            cfg.study.jobs,
        ) {
            Ok(r) => {
                artifacts.push((file.to_string(), r.to_csv()));
                scaling.push(r.verdict(name));
            }
            Err(e) => scaling.push(Verdict::new(
                &format!("{name}_failed: {e}"),
                f64::NAN,
                "<=2".into(),
                false,
            )),
        }
    }
    push(Criterion::new(6, "poincare_eps_scaling", scaling));

    match wellposedness_checks(&cfg.study.field, &cfg.wellposedness) {
        Ok(w) => {
            push(Criterion::new(7, "corrector_wellposedness", w.corrector));
            push(Criterion::new(8, "gradient_sup_norm", vec![w.sup_norms]));
        }
        Err(e) => {
            let reason = format!("corrector_failed: {e}");
            push(Criterion::failed(7, "corrector_wellposedness", &reason));
            push(Criterion::failed(8, "gradient_sup_norm", &reason));
        }
    }

    push(
        match shape_regularity_verdicts(&cfg.study.field, &cfg.decay_field, &cfg.regularity) {
            Ok(v) => Criterion::new(9, "geometry_lemmas", v),
            Err(e) => Criterion::failed(9, "geometry_lemmas", &format!("geometry_failed: {e}")),
        },
    );

    let mut oracle = match oracle_verdicts() {
        Ok(v) => v,
        Err(e) => vec![Verdict::new(
            &format!("oracle_failed: {e}"),
            f64::NAN,
            "evaluated".into(),
            false,
        )],
    };
    oracle.push(determinism_verdict(cfg));
    push(Criterion::new(10, "oracle_equivalence", oracle));
    SuiteOutcome {
        criteria: out,
        artifacts,
    }
}

/// Bump and constant-source studies sharing one corrector cache.
fn study_pair(plan: &StudyPlan) -> Result<(ConvergenceReport, ConvergenceReport), crate::HomogenizeError> {
    let cache = prepare_for(plan)?;
    let bump = convergence_study_with(plan, &cache)?;
    let constant_plan = StudyPlan {
        source: SourceTerm::Constant(1.0),
        ..plan.clone()
    };
    let constant = convergence_study_with(&constant_plan, &cache)?;
    Ok((bump, constant))
}

/// Byte-identical CSVs from repeated runs with different job counts: a
/// reduced convergence study, an ε-scaling study and a seeded Rayleigh
/// certificate.
pub fn determinism_verdict(cfg: &SuiteConfig) -> Verdict {
    let run = |jobs: usize| -> Result<String, String> {
        let plan = StudyPlan {
            levels: vec![
                Level { eps_inv: 2, cells: 64 },
                Level { eps_inv: 4, cells: 64 },
                Level { eps_inv: 8, cells: 64 },
            ],
            window_radius: 2,
            jobs,
            coupling: false,
            ..cfg.study.clone()
        };
        let cache = prepare_for(&plan).map_err(|e| e.to_string())?;
        let mut csv = convergence_study_with(&plan, &cache)
            .map_err(|e| e.to_string())?
            .to_csv();
        let scaling =
            eps_scaling_study(&plan.field, plan.omega, plan.anchor, &[2, 4], 16, jobs).map_err(|e| e.to_string())?;
        csv.push_str(&scaling.to_csv());
        let cell = classify_nodes(
            &CartesianGrid::periodic_cell(32).map_err(|e| e.to_string())?,
            &plan.field.periodic_region(),
        )
        .map_err(|e| e.to_string())?;
        let r = rayleigh_min(&cell, Constraint::Holes).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        csv.push_str(&format!(
            "{:.17e}\n",
            certify(&cell, Constraint::Holes, &r, 20, &mut rng)
        ));
        Ok(csv)
    };
    match (run(2), run(1)) {
        (Ok(a), Ok(b)) => {
            let differing = a.lines().zip(b.lines()).filter(|(x, y)| x != y).count()
                + a.lines().count().abs_diff(b.lines().count());
            Verdict::new(
                "csv_determinism_differing_lines",
                differing as f64,
                "==0".into(),
                differing == 0,
            )
        }
        (Err(e), _) | (_, Err(e)) => Verdict::new(&format!("determinism_failed: {e}"), f64::NAN, "==0".into(), false),
    }
}
