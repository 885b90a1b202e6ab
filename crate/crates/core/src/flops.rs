//! Closed-form forward-pass FLOPs for ViT assemblies and the benchmark's
//! compute gates: 50 GFLOPs per classified image, 100 GFLOPs per
//! change-detection pair.
//!
//! Only multiply-accumulates of matrix products and convolutions are
//! counted; normalization, activations, softmax and interpolation are not.
//! By default one multiply-accumulate counts as one FLOP, which is the
//! convention behind the commonly quoted 17.6 GFLOPs for ViT-B/16 at 224px.
//! [`FlopConvention::MacAsTwo`] doubles every count.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FlopsError {
    #[error("image side {image_side} is not divisible by patch size {patch_size}")]
    NotDivisible { image_side: usize, patch_size: usize },
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("unaccounted component `{0}`: supply a measured FLOPs value")]
    Unaccounted(String),
    #[error("component `{0}` listed twice")]
    DuplicateComponent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    #[default]
    MacAsOne,
    MacAsTwo,
}

impl FlopConvention {
    pub fn per_mac(self) -> f64 {
        match self {
            FlopConvention::MacAsOne => 1.0,
            FlopConvention::MacAsTwo => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub uses_cls_token: bool,
}

impl BackboneSpec {
    /// ViT-B/16.
    pub fn vit_b16() -> Self {
        Self {
            patch_size: 16,
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4.0,
            uses_cls_token: true,
        }
    }

    /// Desk-scale backbone: same wiring as ViT-B, small enough for a CPU.
    pub fn tiny() -> Self {
        Self {
            patch_size: 8,
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4.0,
            uses_cls_token: true,
        }
    }

    pub fn validate(&self) -> Result<(), FlopsError> {
        let bad = |m: &str| Err(FlopsError::InvalidSpec(m.to_string()));
        if self.patch_size == 0 || self.depth == 0 || self.width == 0 || self.heads == 0 {
            return bad("patch_size, depth, width and heads must be positive");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return bad("mlp_ratio must be positive");
        }
        if (self.mlp_ratio * self.width as f64).fract() != 0.0 {
            return bad("mlp_ratio * width must be an integer");
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.width as f64) as usize
    }

    /// Side of the patch grid for a square image.
    pub fn grid_side(&self, image_side: usize) -> Result<usize, FlopsError> {
        if image_side == 0 || image_side % self.patch_size != 0 {
            return Err(FlopsError::NotDivisible {
                image_side,
                patch_size: self.patch_size,
            });
        }
        Ok(image_side / self.patch_size)
    }

    /// Sequence length including the class token.
    pub fn tokens(&self, image_side: usize) -> Result<usize, FlopsError> {
        let g = self.grid_side(image_side)?;
        Ok(g * g + usize::from(self.uses_cls_token))
    }
}

/// FLOPs of a token-wise linear map `in_dim -> out_dim` over `tokens` rows.
pub fn linear_flops(tokens: usize, in_dim: usize, out_dim: usize, c: FlopConvention) -> f64 {
    c.per_mac() * tokens as f64 * in_dim as f64 * out_dim as f64
}

/// FLOPs of a dense `kernel x kernel` convolution producing an
/// `out_h x out_w x cout` map from `cin` channels.
pub fn conv2d_flops(
    out_h: usize,
    out_w: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    c: FlopConvention,
) -> f64 {
    c.per_mac() * (out_h * out_w) as f64 * (cin * kernel * kernel) as f64 * cout as f64
}

/// Per-part forward FLOPs of a ViT: `("patch_embed", ..)` followed by one
/// entry per block.
pub fn vit_forward_breakdown(
    spec: &BackboneSpec,
    image_side: usize,
    c: FlopConvention,
) -> Result<Vec<(String, f64)>, FlopsError> {
    spec.validate()?;
    let g = spec.grid_side(image_side)?;
    let t = spec.tokens(image_side)?;
    let d = spec.width;
    let m = c.per_mac();
    let (tf, df) = (t as f64, d as f64);
    let patch_in = 3 * spec.patch_size * spec.patch_size;
    let mut parts = vec![("patch_embed".to_string(), linear_flops(g * g, patch_in, d, c))];
    let qkv = linear_flops(t, d, 3 * d, c);
    let attn = m * 2.0 * tf * tf * df;
    let proj = linear_flops(t, d, d, c);
    let mlp = linear_flops(t, d, spec.mlp_hidden(), c) + linear_flops(t, spec.mlp_hidden(), d, c);
    for i in 0..spec.depth {
        parts.push((format!("block{}", i + 1), qkv + attn + proj + mlp));
    }
    Ok(parts)
}

/// Total ViT forward cost in GFLOPs.
pub fn vit_forward_flops(
    spec: &BackboneSpec,
    image_side: usize,
    c: FlopConvention,
) -> Result<f64, FlopsError> {
    Ok(vit_forward_breakdown(spec, image_side, c)?
        .iter()
        .map(|(_, f)| f)
        .sum::<f64>()
        / 1e9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    ChangeDetection,
}

impl Task {
    pub fn budget_gflops(self) -> f64 {
        match self {
            Task::Classification => 50.0,
            Task::ChangeDetection => 100.0,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::ChangeDetection => "change_detection",
        })
    }
}

/// How a component's cost is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cost {
    /// Closed-form count, GFLOPs.
    Analytic(f64),
    /// Supplied by the caller (e.g. from a profiler), GFLOPs.
    Measured(f64),
    /// No closed form and no measurement; fails the gate.
    Unaccounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub cost: Cost,
}

impl Component {
    pub fn analytic(name: impl Into<String>, gflops: f64) -> Self {
        Self {
            name: name.into(),
            cost: Cost::Analytic(gflops),
        }
    }

    pub fn measured(name: impl Into<String>, gflops: f64) -> Self {
        Self {
            name: name.into(),
            cost: Cost::Measured(gflops),
        }
    }

    pub fn unaccounted(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            cost: Cost::Unaccounted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub name: String,
    pub gflops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub task: Task,
    pub convention: FlopConvention,
    pub total: f64,
    pub per_component: Vec<ComponentFlops>,
    pub budget: f64,
    pub passed: bool,
}

/// Sums the components of one forward pass and checks the task budget.
/// Every component must carry a cost; unknown ones are an error, never a
/// silent zero.
pub fn gate(
    components: &[Component],
    task: Task,
    convention: FlopConvention,
) -> Result<FlopsReport, FlopsError> {
    let mut per_component = Vec::with_capacity(components.len());
    for comp in components {
        if per_component.iter().any(|p: &ComponentFlops| p.name == comp.name) {
            return Err(FlopsError::DuplicateComponent(comp.name.clone()));
        }
        let gflops = match comp.cost {
            Cost::Analytic(v) | Cost::Measured(v) => v,
            Cost::Unaccounted => return Err(FlopsError::Unaccounted(comp.name.clone())),
        };
        per_component.push(ComponentFlops {
            name: comp.name.clone(),
            gflops,
        });
    }
    let total: f64 = per_component.iter().map(|p| p.gflops).sum();
    let budget = task.budget_gflops();
    Ok(FlopsReport {
        task,
        convention,
        total,
        per_component,
        budget,
        passed: total <= budget,
    })
}

impl FlopsReport {
    /// Plain-text table, one row per component.
    pub fn to_table(&self) -> String {
        let width = self
            .per_component
            .iter()
            .map(|p| p.name.len())
            .chain([9])
            .max()
            .unwrap_or(9);
        let mut out = format!("{:<width$}  {:>12}\n", "component", "GFLOPs");
        for p in &self.per_component {
            out += &format!("{:<width$}  {:>12.4}\n", p.name, p.gflops);
        }
        out += &format!("{:<width$}  {:>12.4}\n", "total", self.total);
        out += &format!("{:<width$}  {:>12.4}\n", "budget", self.budget);
        out += &format!("task: {}  passed: {}\n", self.task, self.passed);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_definition() {
        assert_eq!(linear_flops(10, 3, 5, FlopConvention::MacAsTwo), 2.0 * 10.0 * 3.0 * 5.0);
        assert_eq!(linear_flops(10, 3, 5, FlopConvention::MacAsOne), 150.0);
    }

    #[test]
    fn vit_b16_counts() {
        let spec = BackboneSpec::vit_b16();
        let g224 = vit_forward_flops(&spec, 224, FlopConvention::MacAsOne).unwrap();
        assert!((g224 - 17.56).abs() < 0.01, "{g224}");
        let g224x2 = vit_forward_flops(&spec, 224, FlopConvention::MacAsTwo).unwrap();
        assert!((g224x2 - 2.0 * g224).abs() < 1e-9);
        for c in [FlopConvention::MacAsOne, FlopConvention::MacAsTwo] {
            assert!(vit_forward_flops(&spec, 256, c).unwrap() <= 50.0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = BackboneSpec::vit_b16();
        assert_eq!(
            vit_forward_flops(&spec, 250, FlopConvention::MacAsOne),
            Err(FlopsError::NotDivisible { image_side: 250, patch_size: 16 })
        );
        let mut s = BackboneSpec::tiny();
        s.heads = 3;
        assert!(matches!(s.validate(), Err(FlopsError::InvalidSpec(_))));
    }

    #[test]
    fn gate_budgets_and_errors() {
        let parts = [Component::analytic("a", 30.0), Component::measured("b", 15.0)];
        let r = gate(&parts, Task::Classification, FlopConvention::MacAsOne).unwrap();
        assert_eq!(r.total, 45.0);
        assert!(r.passed);
        let r = gate(
            &[Component::analytic("a", 60.0)],
            Task::Classification,
            FlopConvention::MacAsOne,
        )
        .unwrap();
        assert!(!r.passed);
        let r = gate(
            &[Component::analytic("a", 60.0)],
            Task::ChangeDetection,
            FlopConvention::MacAsOne,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(
            gate(
                &[Component::analytic("a", 1.0), Component::unaccounted("mystery")],
                Task::Classification,
                FlopConvention::MacAsOne
            ),
            Err(FlopsError::Unaccounted("mystery".into()))
        );
        assert!(matches!(
            gate(
                &[Component::analytic("a", 1.0), Component::analytic("a", 1.0)],
                Task::Classification,
                FlopConvention::MacAsOne
            ),
            Err(FlopsError::DuplicateComponent(_))
        ));
    }

    #[test]
    fn budget_at_boundary_passes() {
        let r = gate(
            &[Component::analytic("x", 50.0)],
            Task::Classification,
            FlopConvention::MacAsOne,
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.to_table().contains("passed: true"));
    }
}
