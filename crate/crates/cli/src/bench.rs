//! Kernel micro-benchmarks. Every shape is checked against the dense oracle
//! before any timing starts.

use std::time::Instant;

use serde::Serialize;
use shiftadd_core::gradcheck::rel_error;
use shiftadd_core::quant::{add_matmul, quantize_add, quantize_shift, shift_forward};
use shiftadd_core::tensor::matmul;
use shiftadd_core::{QuantConfig, Rng, Tensor};

use crate::commands::{prepare_out, write_json};
use crate::config::RunConfig;
use crate::CliError;

/// Largest norm-wise relative error accepted between the add kernel and the
/// dense product at `gamma · b`.
pub const ADD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Matmul,
    Matadd,
    Matshift,
    Fakeshift,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Matmul, Kernel::Matadd, Kernel::Matshift, Kernel::Fakeshift];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Matmul => "matmul",
            Kernel::Matadd => "matadd",
            Kernel::Matshift => "matshift",
            Kernel::Fakeshift => "fakeshift",
        }
    }
}

/// `B` independent `M × K` inputs against one `K × N` weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Shape {
    pub b: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl Shape {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("bad shape {s:?}; expected MxKxN or BxMxKxN")))?;
        let shape = match dims[..] {
            [m, k, n] => Shape { b: 1, m, k, n },
            [b, m, k, n] => Shape { b, m, k, n },
            _ => return Err(CliError::Usage(format!("bad shape {s:?}; expected MxKxN or BxMxKxN"))),
        };
        if dims.contains(&0) {
            return Err(CliError::Usage(format!("shape {s:?} has a zero extent")));
        }
        Ok(shape)
    }

    pub fn label(&self) -> String {
        format!("{}x{}x{}x{}", self.b, self.m, self.k, self.n)
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub kernels: Vec<Kernel>,
    pub shapes: Vec<Shape>,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub shape: String,
    pub kernel: Kernel,
    pub median_s: f64,
    pub speedup_vs_matmul: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Operands {
    x: Tensor,
    w: Tensor,
    shift: shiftadd_core::ShiftLinear,
    shift_dense: Tensor,
    add: shiftadd_core::AddLinear,
}

fn operands(shape: &Shape, rng: &mut Rng) -> Result<Operands, CliError> {
    let x = Tensor::randn([shape.b * shape.m, shape.k], 1.0, rng);
    let w = Tensor::randn([shape.k, shape.n], 0.1, rng);
    let shift = quantize_shift(&w, &QuantConfig::default())?;
    let shift_dense = shift.reconstruct();
    let add = quantize_add(&w)?;
    Ok(Operands {
        x,
        w,
        shift,
        shift_dense,
        add,
    })
}

fn apply(kernel: Kernel, o: &Operands) -> Result<Tensor, CliError> {
    Ok(match kernel {
        Kernel::Matmul => matmul(&o.x, &o.w)?,
        Kernel::Matadd => add_matmul(&o.x, &o.add)?,
        Kernel::Matshift => shift_forward(&o.x, &o.shift)?,
        Kernel::Fakeshift => matmul(&o.x, &o.shift_dense)?,
    })
}

/// Oracle gate: shift kernel bit-identical to fake-shift, add kernel within
/// [`ADD_TOLERANCE`] of the dense product at `gamma · b`.
fn check(o: &Operands, label: &str) -> Result<(), CliError> {
    let shifted = apply(Kernel::Matshift, o)?;
    let fake = apply(Kernel::Fakeshift, o)?;
    if !shifted.bit_eq(&fake) {
        return Err(CliError::Numeric(format!(
            "{label}: shift kernel differs from fake-shift"
        )));
    }
    let added = apply(Kernel::Matadd, o)?;
    let dense = matmul(&o.x, &o.add.reconstruct())?;
    let err = rel_error(&added, &dense);
    if !(err <= ADD_TOLERANCE) {
        return Err(CliError::Numeric(format!("{label}: add kernel relative error {err:e}")));
    }
    Ok(())
}

fn time(kernel: Kernel, o: &Operands, opts: &BenchOptions) -> Result<f64, CliError> {
    for _ in 0..opts.warmup {
        std::hint::black_box(apply(kernel, o)?);
    }
    let mut t = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(apply(kernel, o)?);
        t.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut t))
}

/// Checks and times every shape. The matmul baseline is always timed; its
/// row is emitted only when requested.
pub fn measure(opts: &BenchOptions) -> Result<Vec<BenchRow>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rng = Rng::new(opts.seed);
        let mut rows = Vec::new();
        for shape in &opts.shapes {
            let label = shape.label();
            let o = operands(shape, &mut rng)?;
            check(&o, &label)?;
            let base = time(Kernel::Matmul, &o, opts)?;
            for &k in &opts.kernels {
                let median_s = if k == Kernel::Matmul { base } else { time(k, &o, opts)? };
                rows.push(BenchRow {
                    shape: label.clone(),
                    kernel: k,
                    median_s,
                    speedup_vs_matmul: base / median_s,
                });
            }
        }
        Ok(rows)
    })
}

#[derive(Serialize)]
struct BenchMeta<'a> {
    threads: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
    shapes: Vec<String>,
    rows: &'a [BenchRow],
}

pub fn run(cfg: &RunConfig, opts: &BenchOptions) -> Result<(), CliError> {
    let rows = measure(opts)?;
    let out = prepare_out(cfg)?;
    let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
    w.write_record(["shape", "kernel", "median_s", "speedup_vs_matmul"])?;
    for r in &rows {
        w.write_record([
            r.shape.clone(),
            r.kernel.name().to_string(),
            r.median_s.to_string(),
            r.speedup_vs_matmul.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(
        &out.join("bench.json"),
        &BenchMeta {
            threads: opts.threads.max(1),
            reps: opts.reps.max(1),
            warmup: opts.warmup,
            seed: opts.seed,
            shapes: opts.shapes.iter().map(Shape::label).collect(),
            rows: &rows,
        },
    )
}
