//! Numerical linear-independence checks for activation derivative families.
//!
//! The gated expert kernel is `u(x; M, a) = exp(x'Mx) act(a'x)` (linear when
//! the activation is the identity). Strong identifiability asks that such
//! kernels together with their low-order parameter derivatives be linearly
//! independent as functions of x; here that is operationalized as the
//! smallest singular value of their column-normalized evaluations on a
//! seeded sample. Linear experts fail through the exact relation
//! `a' du/da = u`, and that failure is measurable.

use nalgebra::DMatrix;

use crate::activation::ActivationKind;
use crate::error::IdentError;
use crate::measure::MixingMeasure;
use crate::voronoi::QuadratureGrid;

/// Mixed partial derivative of the expert kernel.
///
/// `t1` lists matrix entry indices (one per derivative order taken in `M`),
/// `t2` lists coordinate indices for derivatives in `a`; at most two total.
/// Differentiating `exp(x'Mx)` in entry `(p,q)` multiplies by `x_p x_q`, and
/// differentiating `act(a'x)` in coordinate `p` multiplies by `x_p` and
/// raises the activation derivative order, so the closed form is
/// `exp(x'Mx) * prod(t1 factors) * prod(t2 factors) * act^(|t2|)(a'x)`.
pub fn u_derivative(
    x: &[f64],
    m: &DMatrix<f64>,
    a: &[f64],
    t1: &[(usize, usize)],
    t2: &[usize],
    gated: bool,
    act: &ActivationKind,
) -> Result<f64, IdentError> {
    let order = t1.len() + t2.len();
    if order > 2 {
        return Err(IdentError::UnsupportedOrder { order });
    }
    let quad = crate::model::quad_form(m, x);
    let exp_part = quad.exp();
    let mut factor = 1.0;
    for &(p, q) in t1 {
        factor *= x[p] * x[q];
    }
    for &p in t2 {
        factor *= x[p];
    }
    let s: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
    let act_part = if gated {
        act.eval(s, t2.len())
    } else {
        // Linear expert: value s, slope one, curvature zero.
        match t2.len() {
            0 => s,
            1 => 1.0,
            _ => 0.0,
        }
    };
    Ok(exp_part * factor * act_part)
}

/// Largest violation of `a' du/da = u` over the sample.
///
/// Exact (up to rounding) for the identity activation; strictly positive for
/// a sigmoid with nonzero argument range.
pub fn pde_residual(
    act: &ActivationKind,
    m: &DMatrix<f64>,
    a: &[f64],
    sample: &QuadratureGrid,
) -> Result<f64, IdentError> {
    let mut worst = 0.0_f64;
    for x in sample.rows() {
        let u = u_derivative(x, m, a, &[], &[], true, act)?;
        let mut directional = 0.0;
        for (p, &ap) in a.iter().enumerate() {
            directional += ap * u_derivative(x, m, a, &[], &[p], true, act)?;
        }
        worst = worst.max((directional - u).abs());
    }
    Ok(worst)
}

/// One entry of a derivative family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Member {
    /// The gated kernel itself at component `(h, i, k)`.
    Kernel { h: usize, i: usize, k: usize },
    /// A mixed partial of the gated kernel.
    KernelPartial {
        h: usize,
        i: usize,
        k: usize,
        t1: Vec<(usize, usize)>,
        t2: Vec<usize>,
    },
    /// `act(f[h,k](x))` where `f` is the linear inner mixture.
    OuterValue { h: usize, k: usize },
    /// `d^|r| v / dM^r` at `M[h,i]` weighted by `act'(f[h,k]) / E[h]`,
    /// where `v(x; M) = exp(x'Mx) f[h,k](x)`.
    WeightedVPartial {
        h: usize,
        i: usize,
        k: usize,
        r: Vec<(usize, usize)>,
    },
    /// A linear-kernel partial weighted by `act'(f[h,k]) / E[h]`.
    WeightedUPartial {
        h: usize,
        i: usize,
        k: usize,
        t1: Vec<(usize, usize)>,
        t2: Vec<usize>,
    },
    /// Product of two first-order linear-kernel partials weighted by
    /// `act''(f[h,k]) / E[h]^2`.
    UProduct {
        h: usize,
        k: usize,
        left: (usize, FirstOrder),
        right: (usize, FirstOrder),
    },
    /// Product of two first-order v partials weighted by
    /// `act''(f[h,k]) / E[h]^2`.
    VProduct {
        h: usize,
        k: usize,
        left: (usize, (usize, usize)),
        right: (usize, (usize, usize)),
    },
}

/// First-order derivative direction of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FirstOrder {
    Gate(usize, usize),
    Expert(usize),
}

impl Member {
    pub fn descriptor(&self) -> String {
        match self {
            Member::Kernel { h, i, k } => format!("u[{h},{i},{k}]"),
            Member::KernelPartial { h, i, k, t1, t2 } => {
                format!("du[{h},{i},{k}] M{t1:?} a{t2:?}")
            }
            Member::OuterValue { h, k } => format!("act(f[{h},{k}])"),
            Member::WeightedVPartial { h, i, k, r } => format!("dv[{h},{i},{k}] M{r:?}"),
            Member::WeightedUPartial { h, i, k, t1, t2 } => {
                format!("du*act'[{h},{i},{k}] M{t1:?} a{t2:?}")
            }
            Member::UProduct { h, k, left, right } => {
                format!("du.du*act''[{h},{k}] {left:?} {right:?}")
            }
            Member::VProduct { h, k, left, right } => {
                format!("dv.dv*act''[{h},{k}] {left:?} {right:?}")
            }
        }
    }
}

/// A finite family of scalar functions of x, evaluated together.
pub struct FunctionFamily {
    measure: MixingMeasure,
    act: ActivationKind,
    members: Vec<Member>,
}

/// Per-point shared quantities: raw gate exponentials, their head sums, the
/// linear inner mixtures, and all expert dot products.
struct PointContext {
    exps: Vec<Vec<f64>>,
    e_sum: Vec<f64>,
    f_lin: Vec<Vec<f64>>,
    dots: Vec<Vec<Vec<f64>>>,
}

impl FunctionFamily {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn descriptors(&self) -> Vec<String> {
        self.members.iter().map(Member::descriptor).collect()
    }

    /// Reorder members; the Gram spectrum must not care.
    pub fn permuted(&self, order: &[usize]) -> FunctionFamily {
        FunctionFamily {
            measure: self.measure.clone(),
            act: self.act,
            members: order.iter().map(|&j| self.members[j].clone()).collect(),
        }
    }

    fn context(&self, x: &[f64]) -> PointContext {
        let g = &self.measure;
        let mut exps = Vec::with_capacity(g.heads());
        let mut e_sum = Vec::with_capacity(g.heads());
        let mut f_lin = Vec::with_capacity(g.heads());
        let mut dots = Vec::with_capacity(g.heads());
        for h in 0..g.heads() {
            let head_exps: Vec<f64> = (0..g.experts())
                .map(|i| crate::model::quad_form(g.gating(h, i), x).exp())
                .collect();
            let total: f64 = head_exps.iter().sum();
            let head_dots: Vec<Vec<f64>> = (0..g.experts())
                .map(|i| {
                    (0..g.channels())
                        .map(|k| {
                            g.expert(h, i, k)
                                .iter()
                                .zip(x)
                                .map(|(ai, xi)| ai * xi)
                                .sum()
                        })
                        .collect()
                })
                .collect();
            let head_f: Vec<f64> = (0..g.channels())
                .map(|k| {
                    (0..g.experts())
                        .map(|i| head_exps[i] * head_dots[i][k])
                        .sum::<f64>()
                        / total
                })
                .collect();
            exps.push(head_exps);
            e_sum.push(total);
            f_lin.push(head_f);
            dots.push(head_dots);
        }
        PointContext {
            exps,
            e_sum,
            f_lin,
            dots,
        }
    }

    fn eval_first_order(&self, ctx: &PointContext, x: &[f64], h: usize, k: usize, i: usize, d: FirstOrder) -> f64 {
        let e = ctx.exps[h][i];
        match d {
            FirstOrder::Gate(p, q) => x[p] * x[q] * e * ctx.dots[h][i][k],
            FirstOrder::Expert(p) => e * x[p],
        }
    }

    fn eval_member(&self, member: &Member, ctx: &PointContext, x: &[f64]) -> f64 {
        match member {
            Member::Kernel { h, i, k } => {
                ctx.exps[*h][*i] * self.act.value(ctx.dots[*h][*i][*k])
            }
            Member::KernelPartial { h, i, k, t1, t2 } => {
                let mut factor = ctx.exps[*h][*i];
                for &(p, q) in t1 {
                    factor *= x[p] * x[q];
                }
                for &p in t2 {
                    factor *= x[p];
                }
                factor * self.act.eval(ctx.dots[*h][*i][*k], t2.len())
            }
            Member::OuterValue { h, k } => self.act.value(ctx.f_lin[*h][*k]),
            Member::WeightedVPartial { h, i, k, r } => {
                let mut factor = ctx.exps[*h][*i] * ctx.f_lin[*h][*k];
                for &(p, q) in r {
                    factor *= x[p] * x[q];
                }
                factor * self.act.deriv(ctx.f_lin[*h][*k]) / ctx.e_sum[*h]
            }
            Member::WeightedUPartial { h, i, k, t1, t2 } => {
                let mut factor = ctx.exps[*h][*i];
                for &(p, q) in t1 {
                    factor *= x[p] * x[q];
                }
                for &p in t2 {
                    factor *= x[p];
                }
                let linear_part = match t2.len() {
                    0 => ctx.dots[*h][*i][*k],
                    1 => 1.0,
                    _ => 0.0,
                };
                factor * linear_part * self.act.deriv(ctx.f_lin[*h][*k]) / ctx.e_sum[*h]
            }
            Member::UProduct { h, k, left, right } => {
                let lv = self.eval_first_order(ctx, x, *h, *k, left.0, left.1);
                let rv = self.eval_first_order(ctx, x, *h, *k, right.0, right.1);
                lv * rv * self.act.deriv2(ctx.f_lin[*h][*k]) / (ctx.e_sum[*h] * ctx.e_sum[*h])
            }
            Member::VProduct { h, k, left, right } => {
                let f = ctx.f_lin[*h][*k];
                let lv = x[left.1 .0] * x[left.1 .1] * ctx.exps[*h][left.0] * f;
                let rv = x[right.1 .0] * x[right.1 .1] * ctx.exps[*h][right.0] * f;
                lv * rv * self.act.deriv2(f) / (ctx.e_sum[*h] * ctx.e_sum[*h])
            }
        }
    }

    /// Evaluate every member at one point.
    pub fn evaluate_at(&self, x: &[f64]) -> Vec<f64> {
        let ctx = self.context(x);
        self.members
            .iter()
            .map(|m| self.eval_member(m, &ctx, x))
            .collect()
    }
}

fn gate_indices(dim: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for p in 0..dim {
        for q in p..dim {
            out.push((p, q));
        }
    }
    out
}

/// All first-order directions, gates before experts.
fn first_orders(dim: usize) -> Vec<FirstOrder> {
    let mut out: Vec<FirstOrder> = gate_indices(dim)
        .into_iter()
        .map(|(p, q)| FirstOrder::Gate(p, q))
        .collect();
    out.extend((0..dim).map(FirstOrder::Expert));
    out
}

/// Unordered pairs (with repetition) of a slice, in lexicographic order.
fn multisets<T: Clone>(items: &[T]) -> Vec<(T, T)> {
    let mut out = Vec::new();
    for (j, a) in items.iter().enumerate() {
        for b in &items[j..] {
            out.push((a.clone(), b.clone()));
        }
    }
    out
}

/// Kernel-and-derivatives family at every component of the measure.
///
/// Matrix derivative indices are canonicalized to the upper triangle; the
/// symmetric entry produces the same function and would only duplicate
/// columns. Members that are identically zero for the configured activation
/// (pure second-order expert derivatives under the identity) are omitted.
pub fn build_type1_family(truth: &MixingMeasure, act: ActivationKind) -> FunctionFamily {
    let d = truth.dim();
    let gates = gate_indices(d);
    let mut members = Vec::new();
    for h in 0..truth.heads() {
        for i in 0..truth.experts() {
            for k in 0..truth.channels() {
                members.push(Member::Kernel { h, i, k });
                for &(p, q) in &gates {
                    members.push(Member::KernelPartial {
                        h,
                        i,
                        k,
                        t1: vec![(p, q)],
                        t2: vec![],
                    });
                }
                for p in 0..d {
                    members.push(Member::KernelPartial {
                        h,
                        i,
                        k,
                        t1: vec![],
                        t2: vec![p],
                    });
                }
                for (g1, g2) in multisets(&gates) {
                    members.push(Member::KernelPartial {
                        h,
                        i,
                        k,
                        t1: vec![g1, g2],
                        t2: vec![],
                    });
                }
                for &(p, q) in &gates {
                    for r in 0..d {
                        members.push(Member::KernelPartial {
                            h,
                            i,
                            k,
                            t1: vec![(p, q)],
                            t2: vec![r],
                        });
                    }
                }
                if !act.is_identity() {
                    for p in 0..d {
                        for q in p..d {
                            members.push(Member::KernelPartial {
                                h,
                                i,
                                k,
                                t1: vec![],
                                t2: vec![p, q],
                            });
                        }
                    }
                }
            }
        }
    }
    FunctionFamily {
        measure: truth.clone(),
        act,
        members,
    }
}

/// The outer-activation family: values, first-derivative-weighted kernel and
/// v partials, and second-derivative-weighted products of first-order
/// partials. Product index pairs are canonicalized so each distinct function
/// appears once; the `act''` classes are omitted for the identity activation,
/// whose second derivative vanishes identically.
pub fn build_type2_family(truth: &MixingMeasure, act: ActivationKind) -> FunctionFamily {
    let d = truth.dim();
    let gates = gate_indices(d);
    let mut members = Vec::new();
    for h in 0..truth.heads() {
        for k in 0..truth.channels() {
            members.push(Member::OuterValue { h, k });
        }
        for i in 0..truth.experts() {
            for k in 0..truth.channels() {
                for &(p, q) in &gates {
                    members.push(Member::WeightedVPartial {
                        h,
                        i,
                        k,
                        r: vec![(p, q)],
                    });
                }
                for (g1, g2) in multisets(&gates) {
                    members.push(Member::WeightedVPartial {
                        h,
                        i,
                        k,
                        r: vec![g1, g2],
                    });
                }
                for &(p, q) in &gates {
                    members.push(Member::WeightedUPartial {
                        h,
                        i,
                        k,
                        t1: vec![(p, q)],
                        t2: vec![],
                    });
                }
                for p in 0..d {
                    members.push(Member::WeightedUPartial {
                        h,
                        i,
                        k,
                        t1: vec![],
                        t2: vec![p],
                    });
                }
                for (g1, g2) in multisets(&gates) {
                    members.push(Member::WeightedUPartial {
                        h,
                        i,
                        k,
                        t1: vec![g1, g2],
                        t2: vec![],
                    });
                }
                for &(p, q) in &gates {
                    for r in 0..d {
                        members.push(Member::WeightedUPartial {
                            h,
                            i,
                            k,
                            t1: vec![(p, q)],
                            t2: vec![r],
                        });
                    }
                }
            }
        }
        if !act.is_identity() {
            let firsts = first_orders(d);
            for k in 0..truth.channels() {
                let mut sides = Vec::new();
                for i in 0..truth.experts() {
                    for f in &firsts {
                        sides.push((i, *f));
                    }
                }
                for (left, right) in multisets(&sides) {
                    members.push(Member::UProduct { h, k, left, right });
                }
                let mut v_sides = Vec::new();
                for i in 0..truth.experts() {
                    for &(p, q) in &gates {
                        v_sides.push((i, (p, q)));
                    }
                }
                for (left, right) in multisets(&v_sides) {
                    members.push(Member::VProduct { h, k, left, right });
                }
            }
        }
    }
    FunctionFamily {
        measure: truth.clone(),
        act,
        members,
    }
}

/// Result of a Gram conditioning check.
#[derive(Debug, Clone)]
pub struct GramReport {
    pub sigma_min: f64,
    pub members: usize,
    /// Members whose evaluations vanish on the whole sample: an exact linear
    /// dependence, reported with `sigma_min` zero.
    pub zero_members: Vec<String>,
}

/// Smallest singular value of the column-normalized evaluation matrix.
pub fn gram_min_singular(
    family: &FunctionFamily,
    sample: &QuadratureGrid,
) -> Result<GramReport, IdentError> {
    let m = family.len();
    let q = sample.len();
    if q < 4 * m {
        return Err(IdentError::SampleTooSmall {
            got: q,
            members: m,
            need: 4 * m,
        });
    }
    let mut matrix = DMatrix::zeros(q, m);
    for (row, x) in sample.rows().enumerate() {
        let values = family.evaluate_at(x);
        for (col, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(IdentError::NonFiniteMember {
                    descriptor: family.members()[col].descriptor(),
                    point: row,
                });
            }
            matrix[(row, col)] = *v;
        }
    }
    let mut zero_members = Vec::new();
    for col in 0..m {
        let norm = matrix.column(col).norm();
        if norm == 0.0 {
            zero_members.push(family.members()[col].descriptor());
        } else {
            for row in 0..q {
                matrix[(row, col)] /= norm;
            }
        }
    }
    if !zero_members.is_empty() {
        return Ok(GramReport {
            sigma_min: 0.0,
            members: m,
            zero_members,
        });
    }
    let svd = matrix.svd(false, false);
    let sigma_min = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(GramReport {
        sigma_min,
        members: m,
        zero_members,
    })
}
