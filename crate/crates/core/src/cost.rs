//! Analytical energy/latency model: per-layer operation counts, a 45nm unit
//! cost table, and a two-level (DRAM/SRAM) byte-traffic estimate.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{grid_side, AttnMode, Projection};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::model::{FeedForward, Vit};
use crate::moe::MoeLayer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Mult,
    Add,
    Shift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Format {
    Fp32,
    Fp16,
    Int32,
    Int16,
    Int8,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Mult => "mult",
            Op::Add => "add",
            Op::Shift => "shift",
        })
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Fp32 => "FP32",
            Format::Fp16 => "FP16",
            Format::Int32 => "INT32",
            Format::Int16 => "INT16",
            Format::Int8 => "INT8",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub op: Op,
    pub format: Format,
    pub energy_pj: f64,
    pub area_um2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitCost {
    pub energy_pj: f64,
    pub area_um2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub entries: Vec<CostEntry>,
    pub dram_pj_per_byte: f64,
    pub sram_pj_per_byte: f64,
}

pub const DEFAULT_DRAM_PJ_PER_BYTE: f64 = 20.0;
pub const DEFAULT_SRAM_PJ_PER_BYTE: f64 = 1.0;

/// 45nm CMOS unit costs (energy pJ, area µm²).
const TABLE_45NM: [(Op, Format, f64, f64); 11] = [
    (Op::Mult, Format::Fp32, 3.7, 7700.0),
    (Op::Mult, Format::Fp16, 0.9, 1640.0),
    (Op::Mult, Format::Int32, 3.1, 3495.0),
    (Op::Mult, Format::Int8, 0.2, 282.0),
    (Op::Add, Format::Fp32, 1.1, 4184.0),
    (Op::Add, Format::Fp16, 0.4, 1360.0),
    (Op::Add, Format::Int32, 0.1, 137.0),
    (Op::Add, Format::Int8, 0.03, 36.0),
    (Op::Shift, Format::Int32, 0.13, 157.0),
    (Op::Shift, Format::Int16, 0.057, 73.0),
    (Op::Shift, Format::Int8, 0.024, 34.0),
];

impl Default for CostTable {
    fn default() -> Self {
        Self::cmos45()
    }
}

impl CostTable {
    pub fn cmos45() -> Self {
        Self {
            entries: TABLE_45NM
                .iter()
                .map(|&(op, format, energy_pj, area_um2)| CostEntry {
                    op,
                    format,
                    energy_pj,
                    area_um2,
                })
                .collect(),
            dram_pj_per_byte: DEFAULT_DRAM_PJ_PER_BYTE,
            sram_pj_per_byte: DEFAULT_SRAM_PJ_PER_BYTE,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: CostTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(e.energy_pj > 0.0 && e.area_um2 > 0.0) {
                return Err(Error::Invalid(format!(
                    "non-positive cost for ({}, {})",
                    e.op, e.format
                )));
            }
        }
        for (i, a) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|b| (b.op, b.format) == (a.op, a.format)) {
                return Err(Error::Invalid(format!("duplicate entry ({}, {})", a.op, a.format)));
            }
        }
        if !(self.dram_pj_per_byte >= 0.0 && self.sram_pj_per_byte >= 0.0) {
            return Err(Error::Invalid("negative data-movement rate".into()));
        }
        Ok(())
    }

    pub fn lookup(&self, op: Op, format: Format) -> Result<UnitCost> {
        self.entries
            .iter()
            .find(|e| e.op == op && e.format == format)
            .map(|e| UnitCost {
                energy_pj: e.energy_pj,
                area_um2: e.area_um2,
            })
            .ok_or_else(|| Error::Lookup {
                op: op.to_string(),
                format: format.to_string(),
                known: self
                    .entries
                    .iter()
                    .map(|e| format!("({}, {})", e.op, e.format))
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    /// Energy ratio of an INT32 multiplication to an INT32 shift and add.
    pub fn int32_ratios(&self) -> Result<Ratios> {
        let mult = self.lookup(Op::Mult, Format::Int32)?;
        let shift = self.lookup(Op::Shift, Format::Int32)?;
        let add = self.lookup(Op::Add, Format::Int32)?;
        Ok(Ratios {
            mult_over_shift_energy: mult.energy_pj / shift.energy_pj,
            mult_over_add_energy: mult.energy_pj / add.energy_pj,
            mult_over_shift_area: mult.area_um2 / shift.area_um2,
            mult_over_add_area: mult.area_um2 / add.area_um2,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub mult_over_shift_energy: f64,
    pub mult_over_add_energy: f64,
    pub mult_over_shift_area: f64,
    pub mult_over_add_area: f64,
}

/// Operation counts of one layer, split by arithmetic family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    /// Full multiplications in dense arithmetic.
    pub mults: u64,
    /// Additions accompanying dense multiplications.
    pub dense_adds: u64,
    pub shifts: u64,
    /// Accumulations of shifted partial products.
    pub shift_adds: u64,
    /// Accumulation-only additions (binarized operands).
    pub adds: u64,
    /// Per-output scales and normalizations, kept apart from `mults`.
    pub scale_mults: u64,
    pub dram_bytes: u64,
    pub sram_bytes: u64,
}

impl OpCount {
    pub fn total_mults(&self) -> u64 {
        self.mults + self.scale_mults
    }

    pub fn total_adds(&self) -> u64 {
        self.dense_adds + self.shift_adds + self.adds
    }
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: Self) {
        self.mults += o.mults;
        self.dense_adds += o.dense_adds;
        self.shifts += o.shifts;
        self.shift_adds += o.shift_adds;
        self.adds += o.adds;
        self.scale_mults += o.scale_mults;
        self.dram_bytes += o.dram_bytes;
        self.sram_bytes += o.sram_bytes;
    }
}

/// Shapes are `m × k` inputs against `k × n` weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerDesc {
    DenseLinear {
        m: u64,
        k: u64,
        n: u64,
    },
    ShiftLinear {
        m: u64,
        k: u64,
        n: u64,
    },
    AddLinear {
        m: u64,
        k: u64,
        n: u64,
    },
    /// Token mixing of `heads` heads over `n` tokens of width `dk`.
    SoftmaxAttention {
        n: u64,
        dk: u64,
        heads: u64,
    },
    LinearAttention {
        n: u64,
        dk: u64,
        heads: u64,
        binary: bool,
    },
    DwConv {
        h: u64,
        w: u64,
        c: u64,
    },
    /// Router `m × d × experts` plus each expert's layers, sized by the
    /// tokens dispatched to it.
    Moe {
        m: u64,
        d: u64,
        experts: Vec<Vec<LayerDesc>>,
    },
}

const F32_BYTES: u64 = 4;

fn act_bytes(elems: u64) -> u64 {
    elems * F32_BYTES
}

pub fn count_ops(desc: &LayerDesc) -> OpCount {
    match *desc {
        LayerDesc::DenseLinear { m, k, n } => OpCount {
            mults: m * k * n,
            dense_adds: m * k.saturating_sub(1) * n,
            dram_bytes: k * n * F32_BYTES,
            sram_bytes: act_bytes(m * k + m * n),
            ..OpCount::default()
        },
        LayerDesc::ShiftLinear { m, k, n } => OpCount {
            shifts: m * k * n,
            shift_adds: m * k.saturating_sub(1) * n,
            // Sign and exponent fit one byte per weight.
            dram_bytes: k * n,
            sram_bytes: act_bytes(m * k + m * n),
            ..OpCount::default()
        },
        LayerDesc::AddLinear { m, k, n } => OpCount {
            adds: m * k * n,
            scale_mults: m * n,
            // One sign bit per weight plus the scale.
            dram_bytes: (k * n).div_ceil(8) + F32_BYTES,
            sram_bytes: act_bytes(m * k + m * n),
            ..OpCount::default()
        },
        LayerDesc::SoftmaxAttention { n, dk, heads } => {
            let per = OpCount {
                // Q·Kᵀ and P·V.
                mults: 2 * n * n * dk,
                dense_adds: n * n * dk.saturating_sub(1) + n * dk * n.saturating_sub(1) + n * n.saturating_sub(1),
                // 1/√dk scaling and row normalization.
                scale_mults: 2 * n * n,
                sram_bytes: act_bytes(3 * n * dk + n * n + n * dk),
                ..OpCount::default()
            };
            times(per, heads)
        }
        LayerDesc::LinearAttention { n, dk, heads, binary } => {
            let io = act_bytes(3 * n * dk + dk * dk + n * dk);
            let per = if binary {
                OpCount {
                    // Kᵀ·V and Q·(KᵀV) select-accumulate; key sums and
                    // denominators are counts.
                    adds: 2 * n * dk * dk + 2 * n * dk,
                    // Folded gamma on numerator and denominator, then division.
                    scale_mults: 2 * n * dk + n,
                    sram_bytes: io,
                    ..OpCount::default()
                }
            } else {
                OpCount {
                    mults: 2 * n * dk * dk + n * dk,
                    // Kᵀ·V, Q·(KᵀV), key sums, denominators.
                    dense_adds: dk * n.saturating_sub(1) * dk
                        + n * dk.saturating_sub(1) * dk
                        + n.saturating_sub(1) * dk
                        + n * dk.saturating_sub(1),
                    scale_mults: n * dk,
                    sram_bytes: io,
                    ..OpCount::default()
                }
            };
            times(per, heads)
        }
        LayerDesc::DwConv { h, w, c } => OpCount {
            mults: 9 * h * w * c,
            dense_adds: 8 * h * w * c,
            dram_bytes: 9 * c * F32_BYTES,
            sram_bytes: act_bytes(2 * h * w * c),
            ..OpCount::default()
        },
        LayerDesc::Moe { m, d, ref experts } => {
            let mut c = count_ops(&LayerDesc::DenseLinear {
                m,
                k: d,
                n: experts.len() as u64,
            });
            for layers in experts {
                for l in layers {
                    c += count_ops(l);
                }
            }
            c
        }
    }
}

fn times(c: OpCount, k: u64) -> OpCount {
    OpCount {
        mults: c.mults * k,
        dense_adds: c.dense_adds * k,
        shifts: c.shifts * k,
        shift_adds: c.shift_adds * k,
        adds: c.adds * k,
        scale_mults: c.scale_mults * k,
        dram_bytes: c.dram_bytes * k,
        sram_bytes: c.sram_bytes * k,
    }
}

/// Table format used for each count family. `None` leaves the family
/// unassigned, which is an error once that family has a nonzero count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Formats {
    pub mult: Option<Format>,
    pub dense_add: Option<Format>,
    pub shift: Option<Format>,
    pub shift_add: Option<Format>,
    pub add: Option<Format>,
    pub scale_mult: Option<Format>,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            mult: Some(Format::Fp32),
            dense_add: Some(Format::Fp32),
            shift: Some(Format::Int16),
            shift_add: Some(Format::Int32),
            add: Some(Format::Int32),
            scale_mult: Some(Format::Int32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerClass {
    Embed,
    Projection,
    TokenMixing,
    DwConv,
    Mlp,
    Router,
    Head,
}

impl LayerClass {
    pub const ALL: [LayerClass; 7] = [
        LayerClass::Embed,
        LayerClass::Projection,
        LayerClass::TokenMixing,
        LayerClass::DwConv,
        LayerClass::Mlp,
        LayerClass::Router,
        LayerClass::Head,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub name: String,
    pub class: LayerClass,
    pub desc: LayerDesc,
    pub count: OpCount,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub compute_pj: f64,
    pub movement_pj: f64,
    pub total_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEnergy {
    pub class: LayerClass,
    #[serde(flatten)]
    pub energy: Energy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    #[serde(flatten)]
    pub energy: Energy,
    pub breakdown: Vec<ClassEnergy>,
}

/// Energy of one count under `formats`.
pub fn energy(count: &OpCount, table: &CostTable, formats: &Formats) -> Result<Energy> {
    let families = [
        (count.mults, Op::Mult, formats.mult, "mult"),
        (count.dense_adds, Op::Add, formats.dense_add, "dense_add"),
        (count.shifts, Op::Shift, formats.shift, "shift"),
        (count.shift_adds, Op::Add, formats.shift_add, "shift_add"),
        (count.adds, Op::Add, formats.add, "add"),
        (count.scale_mults, Op::Mult, formats.scale_mult, "scale_mult"),
    ];
    let mut compute = 0.0f64;
    for (n, op, fmt, family) in families {
        if n == 0 {
            continue;
        }
        let fmt = fmt.ok_or_else(|| Error::Invalid(format!("no format assigned to {family} counts")))?;
        compute += n as f64 * table.lookup(op, fmt)?.energy_pj;
    }
    let movement = count.dram_bytes as f64 * table.dram_pj_per_byte + count.sram_bytes as f64 * table.sram_pj_per_byte;
    Ok(Energy {
        compute_pj: compute,
        movement_pj: movement,
        total_pj: compute + movement,
    })
}

/// Per-class breakdown in [`LayerClass::ALL`] order; the totals are the sums
/// of the breakdown rows in that order.
pub fn energy_report(audit: &[AuditEntry], table: &CostTable, formats: &Formats) -> Result<EnergyReport> {
    let mut breakdown = Vec::new();
    for class in LayerClass::ALL {
        let mut e = Energy::default();
        for a in audit.iter().filter(|a| a.class == class) {
            let x = energy(&a.count, table, formats)?;
            e.compute_pj += x.compute_pj;
            e.movement_pj += x.movement_pj;
        }
        e.total_pj = e.compute_pj + e.movement_pj;
        breakdown.push(ClassEnergy { class, energy: e });
    }
    let mut total = Energy::default();
    for b in &breakdown {
        total.compute_pj += b.energy.compute_pj;
        total.movement_pj += b.energy.movement_pj;
        total.total_pj += b.energy.total_pj;
    }
    Ok(EnergyReport {
        energy: total,
        breakdown,
    })
}

pub fn total_count(audit: &[AuditEntry]) -> OpCount {
    let mut c = OpCount::default();
    for a in audit {
        c += a.count;
    }
    c
}

fn linear_desc(l: &Linear, m: u64) -> LayerDesc {
    let (k, n) = (l.in_dim() as u64, l.out_dim() as u64);
    if l.shift.is_some() {
        LayerDesc::ShiftLinear { m, k, n }
    } else {
        LayerDesc::DenseLinear { m, k, n }
    }
}

fn mlp_descs(mlp: &Mlp, m: u64) -> Vec<LayerDesc> {
    vec![linear_desc(&mlp.fc1, m), linear_desc(&mlp.fc2, m)]
}

/// Splits `m` tokens by `shares`, rounding so the parts sum to `m`.
pub fn split_tokens(m: u64, shares: &[f64]) -> Vec<u64> {
    let mut out: Vec<u64> = shares.iter().map(|&s| (s.max(0.0) * m as f64).round() as u64).collect();
    let sum: u64 = out.iter().sum();
    if let Some(first) = out.first_mut() {
        *first = (*first + m).saturating_sub(sum);
    }
    out
}

fn moe_desc<E>(
    layer: &MoeLayer<E>,
    m: u64,
    d: u64,
    shares: &[f64],
    each: impl Fn(&E, u64) -> Vec<LayerDesc>,
) -> LayerDesc {
    let tokens = split_tokens(m, shares);
    LayerDesc::Moe {
        m,
        d,
        experts: layer
            .experts
            .iter()
            .zip(tokens)
            .map(|(e, t)| if t == 0 { Vec::new() } else { each(e, t) })
            .collect(),
    }
}

/// Per-layer audit of one forward pass over `images` images. MoE layers are
/// sized by `shares` (one share vector per MoE layer in forward order);
/// missing entries fall back to the layer's last dispatch, then to an even
/// split.
pub fn audit_model(model: &Vit, images: usize, shares: &[Vec<f64>]) -> Vec<AuditEntry> {
    let cfg = &model.cfg;
    let n = cfg.tokens() as u64;
    let m = images as u64 * n;
    let d = cfg.dim() as u64;
    let mut moe_idx = 0usize;
    let mut next_shares = |plan: Option<&crate::moe::DispatchPlan>, experts: usize| {
        let s = shares
            .get(moe_idx)
            .cloned()
            .or_else(|| plan.map(|p| p.shares()))
            .unwrap_or_else(|| vec![1.0 / experts as f64; experts]);
        moe_idx += 1;
        s
    };
    let mut out = Vec::new();
    let mut push = |name: String, class: LayerClass, desc: LayerDesc| {
        let count = count_ops(&desc);
        out.push(AuditEntry {
            name,
            class,
            desc,
            count,
        });
    };
    push("embed".into(), LayerClass::Embed, linear_desc(&model.embed, m));
    for (i, b) in model.blocks.iter().enumerate() {
        let pre = format!("blocks.{i}");
        for (name, p) in ["q", "k", "v", "o"].into_iter().zip(b.attn.projections()) {
            let desc = match p {
                Projection::Linear(l) => linear_desc(l, m),
                Projection::Moe(layer) => {
                    let s = next_shares(layer.last_plan.as_ref(), layer.experts.len());
                    moe_desc(layer, m, d, &s, |l, t| vec![linear_desc(l, t)])
                }
            };
            push(format!("{pre}.attn.{name}"), LayerClass::Projection, desc);
        }
        let (h, dk) = (b.attn.cfg.heads as u64, b.attn.cfg.head_dim() as u64);
        let mix = match b.attn.cfg.mode {
            AttnMode::Softmax => LayerDesc::SoftmaxAttention { n, dk, heads: h },
            AttnMode::Linear => LayerDesc::LinearAttention {
                n,
                dk,
                heads: h,
                binary: false,
            },
            AttnMode::LinearBinary => LayerDesc::LinearAttention {
                n,
                dk,
                heads: h,
                binary: true,
            },
        };
        for img in 0..images {
            let name = if images == 1 {
                format!("{pre}.attn.mix")
            } else {
                format!("{pre}.attn.mix[{img}]")
            };
            push(name, LayerClass::TokenMixing, mix.clone());
        }
        if b.attn.cfg.mode.is_linear() && b.attn.cfg.dwconv {
            let side = grid_side(n as usize) as u64;
            for _ in 0..images {
                push(
                    format!("{pre}.attn.dwconv"),
                    LayerClass::DwConv,
                    LayerDesc::DwConv { h: side, w: side, c: d },
                );
            }
        }
        let desc = match &b.ff {
            FeedForward::Mlp(mlp) => {
                for (j, l) in mlp_descs(mlp, m).into_iter().enumerate() {
                    push(format!("{pre}.mlp.fc{}", j + 1), LayerClass::Mlp, l);
                }
                None
            }
            FeedForward::Moe(layer) => {
                let s = next_shares(layer.last_plan.as_ref(), layer.experts.len());
                Some(moe_desc(layer, m, d, &s, mlp_descs))
            }
        };
        if let Some(LayerDesc::Moe { m, d, experts }) = desc {
            push(
                format!("{pre}.mlp.router"),
                LayerClass::Router,
                LayerDesc::DenseLinear {
                    m,
                    k: d,
                    n: experts.len() as u64,
                },
            );
            for (e, layers) in experts.into_iter().enumerate() {
                for (j, l) in layers.into_iter().enumerate() {
                    push(format!("{pre}.mlp.expert{e}.fc{}", j + 1), LayerClass::Mlp, l);
                }
            }
        }
    }
    push(
        "head".into(),
        LayerClass::Head,
        LayerDesc::DenseLinear {
            m: images as u64,
            k: d,
            n: cfg.classes as u64,
        },
    );
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub name: String,
    /// One entry for ordinary layers, one per expert for MoE layers.
    pub seconds: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Experts run one after another.
    pub sequential_s: f64,
    /// Experts run in parallel; an MoE layer costs its slowest expert.
    pub modularized_s: f64,
}

pub fn latency_report(layers: &[LayerTiming]) -> Result<LatencyReport> {
    let mut r = LatencyReport {
        sequential_s: 0.0,
        modularized_s: 0.0,
    };
    for l in layers {
        if l.seconds.is_empty() || l.seconds.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Invalid(format!("layer {} needs nonnegative timings", l.name)));
        }
        r.sequential_s += l.seconds.iter().sum::<f64>();
        r.modularized_s += l.seconds.iter().copied().fold(f64::MIN, f64::max);
    }
    Ok(r)
}
