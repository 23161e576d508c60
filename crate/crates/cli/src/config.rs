//! Experiment configuration in TOML. Every key is optional and falls back to
//! the golden configuration; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! out = "out"
//!
//! [geometry]
//! pattern = { kind = "disk", center = [0.5, 0.5], radius = 0.25 }
//! defects = [{ cell = [0, 0], hole = { kind = "disk", center = [0.5, 0.5], radius = 0.32 } }]
//!
//! [macro]
//! eps_inv = [8, 16, 32]
//! cells = [128, 128, 64]
//! ```
//!
//! `defects = []` gives the purely periodic field.

use std::path::PathBuf;

use perfhom::geometry::{CellIndex, DecayRule, HoleShape, PerforationField, Point};
use perfhom::homogenize::{CorrectorChoice, Level, Rect, SourceTerm, StudyPlan};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    /// TOML syntax, unknown keys and type mismatches.
    #[error("{0}")]
    Parse(String),
    #[error("[{section}] {key}: {msg}")]
    Value { section: String, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub pattern: HoleShape,
    /// Hole shapes in local cell coordinates.
    pub defects: Vec<(CellIndex, HoleShape)>,
    pub decay: Option<DecayRule>,
    /// Decay field used for the summability check of the symmetric
    /// differences, on top of the configured field.
    pub tail_probe: DecayRule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorConfig {
    pub n: usize,
    pub window: i64,
    /// Windows for the well-posedness checks: sup norms compare the first and
    /// last, window growth the last two.
    pub radii: [i64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroConfig {
    pub omega: Rect,
    pub source: SourceTerm,
    pub anchor: Point,
    pub eps_inv: Vec<usize>,
    pub cells: Vec<usize>,
    pub choice: CorrectorChoice,
    pub coupling: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoincareConfig {
    pub eps_inv: Vec<usize>,
    pub cells: usize,
    pub box_hole: HoleShape,
    pub box_rect: Rect,
    pub box_n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub geometry: GeometryConfig,
    pub corrector: CorrectorConfig,
    pub macro_: MacroConfig,
    pub poincare: PoincareConfig,
}

impl Default for ExperimentConfig {
    /// The golden single-defect configuration.
    fn default() -> Self {
        let center = Point::new(0.5, 0.5);
        let half = 0.15 * std::f64::consts::SQRT_2;
        ExperimentConfig {
            seed: 7,
            out: PathBuf::from("out"),
            geometry: GeometryConfig {
                pattern: HoleShape::disk(center, 0.25),
                defects: vec![(CellIndex::ORIGIN, HoleShape::disk(center, 0.32))],
                decay: None,
                tail_probe: DecayRule {
                    amplitude: 0.05,
                    ratio: 0.5,
                },
            },
            corrector: CorrectorConfig {
                n: 64,
                window: 4,
                radii: [4, 6, 8],
            },
            macro_: MacroConfig {
                omega: Rect::unit(),
                source: SourceTerm::default_bump(),
                anchor: center,
                eps_inv: vec![8, 16, 32],
                cells: vec![128, 128, 64],
                choice: CorrectorChoice::Full,
                coupling: false,
            },
            poincare: PoincareConfig {
                eps_inv: vec![4, 8, 16],
                cells: 32,
                box_hole: HoleShape::disk(center, 0.3),
                box_rect: Rect::new(0.5 - half, 0.5 - half, 0.5 + half, 0.5 + half),
                box_n: 256,
            },
        }
    }
}

// On-disk form. Kept separate from the domain types so the core crate does
// not depend on serde.

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum HoleSpec {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
        rotation: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefectSpec {
    cell: [i64; 2],
    hole: HoleSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecaySpec {
    amplitude: f64,
    ratio: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum SourceSpec {
    Bump {
        center: [f64; 2],
        radius: f64,
        amplitude: f64,
    },
    Constant {
        value: f64,
    },
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum ChoiceSpec {
    Full,
    Periodic,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryFile {
    pattern: Option<HoleSpec>,
    defects: Option<Vec<DefectSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decay: Option<DecaySpec>,
    tail_probe: Option<DecaySpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectorFile {
    n: Option<usize>,
    window: Option<i64>,
    radii: Option<[i64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MacroFile {
    omega: Option<[f64; 4]>,
    source: Option<SourceSpec>,
    anchor: Option<[f64; 2]>,
    eps_inv: Option<Vec<usize>>,
    cells: Option<Vec<usize>>,
    choice: Option<ChoiceSpec>,
    coupling: Option<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoincareFile {
    eps_inv: Option<Vec<usize>>,
    cells: Option<usize>,
    box_hole: Option<HoleSpec>,
    #[serde(rename = "box")]
    box_rect: Option<[f64; 4]>,
    box_n: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    geometry: Option<GeometryFile>,
    corrector: Option<CorrectorFile>,
    #[serde(rename = "macro")]
    macro_: Option<MacroFile>,
    poincare: Option<PoincareFile>,
}

fn hole_from(h: HoleSpec) -> HoleShape {
    match h {
        HoleSpec::Disk { center, radius } => HoleShape::disk(Point::new(center[0], center[1]), radius),
        HoleSpec::Ellipse {
            center,
            semi_axes,
            rotation,
        } => HoleShape::ellipse(Point::new(center[0], center[1]), semi_axes[0], semi_axes[1], rotation),
    }
}

fn hole_spec(h: &HoleShape) -> HoleSpec {
    let center = [h.center.x, h.center.y];
    if h.is_disk() {
        HoleSpec::Disk {
            center,
            radius: h.radii.0,
        }
    } else {
        HoleSpec::Ellipse {
            center,
            semi_axes: [h.radii.0, h.radii.1],
            rotation: h.rotation,
        }
    }
}

fn value_err(section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        section: section.to_string(),
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn finite(section: &str, key: &str, values: &[f64]) -> Result<(), ConfigError> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(value_err(section, key, "values must be finite"))
    }
}

fn rect_from(section: &str, key: &str, p: [f64; 4]) -> Result<Rect, ConfigError> {
    finite(section, key, &p)?;
    if !(p[0] < p[2] && p[1] < p[3]) {
        return Err(value_err(section, key, "need x0 < x1 and y0 < y1"));
    }
    Ok(Rect::new(p[0], p[1], p[2], p[3]))
}

fn decay_from(section: &str, key: &str, d: DecaySpec) -> Result<DecayRule, ConfigError> {
    let rule = DecayRule {
        amplitude: d.amplitude,
        ratio: d.ratio,
    };
    rule.validate().map_err(|e| value_err(section, key, e.to_string()))?;
    Ok(rule)
}

fn in_range<T: PartialOrd + std::fmt::Display + Copy>(
    section: &str,
    key: &str,
    values: &[T],
    lo: T,
    hi: T,
) -> Result<(), ConfigError> {
    match values.iter().find(|&&x| x < lo || x > hi) {
        Some(x) => Err(value_err(section, key, format!("{x} outside [{lo}, {hi}]"))),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cfg = ExperimentConfig::default();
        if let Some(seed) = file.seed {
            cfg.seed = seed;
        }
        if let Some(out) = file.out {
            if out.as_os_str().is_empty() {
                return Err(value_err("", "out", "empty path"));
            }
            cfg.out = out;
        }
        if let Some(g) = file.geometry {
            let geo = &mut cfg.geometry;
            if let Some(h) = g.pattern {
                geo.pattern = hole_from(h);
            }
            if let Some(list) = g.defects {
                geo.defects.clear();
                for d in list {
                    let k = CellIndex::new(d.cell[0], d.cell[1]);
                    if geo.defects.iter().any(|(c, _)| *c == k) {
                        return Err(value_err(
                            "geometry",
                            "defects",
                            format!("cell {} {} listed twice", k.i, k.j),
                        ));
                    }
                    geo.defects.push((k, hole_from(d.hole)));
                }
            }
            if let Some(d) = g.decay {
                geo.decay = Some(decay_from("geometry", "decay", d)?);
            }
            if let Some(d) = g.tail_probe {
                geo.tail_probe = decay_from("geometry", "tail_probe", d)?;
            }
        }
        if let Some(c) = file.corrector {
            let cor = &mut cfg.corrector;
            cor.n = c.n.unwrap_or(cor.n);
            cor.window = c.window.unwrap_or(cor.window);
            cor.radii = c.radii.unwrap_or(cor.radii);
        }
        if let Some(m) = file.macro_ {
            let mac = &mut cfg.macro_;
            if let Some(r) = m.omega {
                mac.omega = rect_from("macro", "omega", r)?;
            }
            if let Some(s) = m.source {
                mac.source = match s {
                    SourceSpec::Bump {
                        center,
                        radius,
                        amplitude,
                    } => {
                        finite("macro", "source", &[center[0], center[1], radius, amplitude])?;
                        SourceTerm::Bump {
                            center: Point::new(center[0], center[1]),
                            radius,
                            amplitude,
                        }
                    }
                    SourceSpec::Constant { value } => {
                        finite("macro", "source", &[value])?;
                        SourceTerm::Constant(value)
                    }
                };
            }
            if let Some(a) = m.anchor {
                finite("macro", "anchor", &a)?;
                mac.anchor = Point::new(a[0], a[1]);
            }
            mac.eps_inv = m.eps_inv.unwrap_or(std::mem::take(&mut mac.eps_inv));
            mac.cells = m.cells.unwrap_or(std::mem::take(&mut mac.cells));
            if let Some(c) = m.choice {
                mac.choice = match c {
                    ChoiceSpec::Full => CorrectorChoice::Full,
                    ChoiceSpec::Periodic => CorrectorChoice::PeriodicOnly,
                };
            }
            mac.coupling = m.coupling.unwrap_or(mac.coupling);
        }
        if let Some(p) = file.poincare {
            let poi = &mut cfg.poincare;
            poi.eps_inv = p.eps_inv.unwrap_or(std::mem::take(&mut poi.eps_inv));
            poi.cells = p.cells.unwrap_or(poi.cells);
            if let Some(h) = p.box_hole {
                poi.box_hole = hole_from(h);
            }
            if let Some(r) = p.box_rect {
                poi.box_rect = rect_from("poincare", "box", r)?;
            }
            poi.box_n = p.box_n.unwrap_or(poi.box_n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks and the geometric admissibility of the field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.field()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.poincare
            .box_hole
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        in_range("corrector", "n", &[self.corrector.n], 64, 2048)?;
        in_range("corrector", "window", &[self.corrector.window], 1, 16)?;
        in_range("corrector", "radii", &self.corrector.radii, 1, 16)?;
        let r = self.corrector.radii;
        if !(r[0] <= r[1] && r[1] < r[2]) {
            return Err(value_err("corrector", "radii", "need r1 <= r2 < r3"));
        }
        in_range("macro", "eps_inv", &self.macro_.eps_inv, 1, 512)?;
        in_range("macro", "cells", &self.macro_.cells, 64, 1024)?;
        if self.macro_.eps_inv.len() != self.macro_.cells.len() {
            return Err(value_err("macro", "cells", "one entry per eps_inv value"));
        }
        if self.macro_.eps_inv.len() < 3 {
            return Err(value_err("macro", "eps_inv", "a study needs at least three values"));
        }
        for &e in &self.macro_.eps_inv {
            perfhom::homogenize::MacroProblem::new(self.macro_.omega, self.macro_.source, e, self.macro_.anchor)
                .map_err(|err| value_err("macro", "eps_inv", err.to_string()))?;
        }
        in_range("poincare", "eps_inv", &self.poincare.eps_inv, 1, 512)?;
        in_range("poincare", "cells", &[self.poincare.cells], 16, 1024)?;
        in_range("poincare", "box_n", &[self.poincare.box_n], 16, 2048)?;
        Ok(())
    }

    pub fn field(&self) -> PerforationField {
        let mut f = PerforationField::periodic(self.geometry.pattern);
        for &(k, shape) in &self.geometry.defects {
            f = f.with_override(k, shape);
        }
        if let Some(rule) = self.geometry.decay {
            f = f.with_decay(rule);
        }
        f
    }

    pub fn tail_probe_field(&self) -> PerforationField {
        PerforationField::periodic(self.geometry.pattern).with_decay(self.geometry.tail_probe)
    }

    pub fn study_plan(&self, jobs: usize) -> StudyPlan {
        StudyPlan {
            field: self.field(),
            omega: self.macro_.omega,
            source: self.macro_.source,
            anchor: self.macro_.anchor,
            levels: self
                .macro_
                .eps_inv
                .iter()
                .zip(&self.macro_.cells)
                .map(|(&eps_inv, &cells)| Level { eps_inv, cells })
                .collect(),
            window_radius: self.corrector.window,
            choice: self.macro_.choice,
            jobs,
            coupling: self.macro_.coupling,
        }
    }

    /// Canonical TOML form; `parse(to_text())` gives back an equal value.
    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let m = &self.macro_;
        let p = &self.poincare;
        let rect = |r: &Rect| [r.x0, r.y0, r.x1, r.y1];
        let file = ConfigFile {
            seed: Some(self.seed),
            out: Some(self.out.clone()),
            geometry: Some(GeometryFile {
                pattern: Some(hole_spec(&g.pattern)),
                defects: Some(
                    g.defects
                        .iter()
                        .map(|(k, h)| DefectSpec {
                            cell: [k.i, k.j],
                            hole: hole_spec(h),
                        })
                        .collect(),
                ),
                decay: g.decay.map(|d| DecaySpec {
                    amplitude: d.amplitude,
                    ratio: d.ratio,
                }),
                tail_probe: Some(DecaySpec {
                    amplitude: g.tail_probe.amplitude,
                    ratio: g.tail_probe.ratio,
                }),
            }),
            corrector: Some(CorrectorFile {
                n: Some(self.corrector.n),
                window: Some(self.corrector.window),
                radii: Some(self.corrector.radii),
            }),
            macro_: Some(MacroFile {
                omega: Some(rect(&m.omega)),
                source: Some(match m.source {
                    SourceTerm::Bump {
                        center,
                        radius,
                        amplitude,
                    } => SourceSpec::Bump {
                        center: [center.x, center.y],
                        radius,
                        amplitude,
                    },
                    SourceTerm::Constant(value) => SourceSpec::Constant { value },
                }),
                anchor: Some([m.anchor.x, m.anchor.y]),
                eps_inv: Some(m.eps_inv.clone()),
                cells: Some(m.cells.clone()),
                choice: Some(match m.choice {
                    CorrectorChoice::Full => ChoiceSpec::Full,
                    CorrectorChoice::PeriodicOnly => ChoiceSpec::Periodic,
                }),
                coupling: Some(m.coupling),
            }),
            poincare: Some(PoincareFile {
                eps_inv: Some(p.eps_inv.clone()),
                cells: Some(p.cells),
                box_hole: Some(hole_spec(&p.box_hole)),
                box_rect: Some(rect(&p.box_rect)),
                box_n: Some(p.box_n),
            }),
        };
        toml::to_string(&file).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_sections() {
        for text in [
            "[geometry]\nradius = 0.2",
            "[mesh]",
            "seed 3",
            "[geometry]\npattern = { kind = \"square\" }",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(ConfigError::Parse(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn ranges_are_enforced() {
        let pattern = "[geometry]\npattern = { kind = \"disk\", center = [0.5, 0.5], radius = 0.6 }";
        for text in [
            "[corrector]\nn = 32",
            "[macro]\neps_inv = [8, 16]\ncells = [64, 64]",
            pattern,
            "[geometry]\ndecay = { amplitude = 0.05, ratio = 1.5 }",
            "[corrector]\nradii = [4, 8, 6]",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn defect_list_replaces_the_default() {
        let text = "[geometry]\ndefects = [{ cell = [1, 2], hole = { kind = \"ellipse\", center = [0.5, 0.5], \
                    semi_axes = [0.3, 0.2], rotation = 0.1 } }]";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.geometry.defects.len(), 1);
        assert_eq!(cfg.geometry.defects[0].0, CellIndex::new(1, 2));
        assert!(!cfg.geometry.defects[0].1.is_disk());
        let periodic = ExperimentConfig::parse("[geometry]\ndefects = []").unwrap();
        assert!(periodic.geometry.defects.is_empty());
        assert!(ExperimentConfig::parse(&periodic.to_text())
            .unwrap()
            .geometry
            .defects
            .is_empty());
    }
}
