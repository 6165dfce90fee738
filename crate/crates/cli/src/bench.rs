//! Direct vs im2col convolution timing.

use std::path::Path;
use std::time::Instant;

use st4d::nn::{conv_forward, ConvPath, ConvSpec};
use st4d::{Real, Rng, Tensor};

use crate::CliError;

/// Path agreement bound, relative to the largest output magnitude.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    pub spec: ConvSpec,
    pub batch: usize,
    pub input: Vec<usize>,
}

/// Used when neither `--spec` nor `--sweep` is given.
pub const DEFAULT_SWEEP: &[&str] = &[
    "rank=4 in=1 out=16 input=32x32x32x15 kernel=3 stride=1 pad=1",
    "rank=4 in=8 out=8 input=8x8x8x8 kernel=1 stride=1 pad=0",
    "rank=4 in=4 out=4 input=16x16x16x8 kernel=3 stride=2 pad=1",
    "rank=3 in=16 out=8 input=16x16x16 kernel=3 stride=1 pad=1",
];

fn bad(line: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("bench spec '{line}': {msg}"))
}

pub fn parse_case(line: &str) -> Result<BenchCase, CliError> {
    let (mut rank, mut cin, mut cout, mut input, mut batch) = (None, 1, 1, None, 1);
    let (mut kernel, mut stride, mut pad) = (3, 1, 0);
    for tok in line.split([' ', ',', '\t']).filter(|t| !t.is_empty()) {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad(line, format!("expected key=value, got '{tok}'")))?;
        let num = || v.parse::<usize>().map_err(|_| bad(line, format!("bad {k} '{v}'")));
        match k {
            "rank" => rank = Some(num()?),
            "in" => cin = num()?,
            "out" => cout = num()?,
            "batch" => batch = num()?,
            "kernel" => kernel = num()?,
            "stride" => stride = num()?,
            "pad" => pad = num()?,
            "input" => {
                input = Some(
                    v.split('x')
                        .map(|p| p.parse::<usize>().map_err(|_| bad(line, format!("bad input '{v}'"))))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
            _ => return Err(bad(line, format!("unknown key '{k}'"))),
        }
    }
    let input = input.ok_or_else(|| bad(line, "missing input"))?;
    let rank = rank.unwrap_or(input.len());
    if input.len() != rank {
        return Err(bad(line, format!("input has {} extents for rank {rank}", input.len())));
    }
    let spec = ConvSpec::cubic(rank, cin, cout, kernel, stride, pad, true);
    spec.validate().map_err(|e| bad(line, e))?;
    spec.output_extents(&input).map_err(|e| bad(line, e))?;
    Ok(BenchCase { spec, batch, input })
}

pub struct BenchRow {
    pub direct_ms: f64,
    pub im2col_ms: f64,
    pub rel_err: f64,
    pub exact: bool,
    pub macs: f64,
}

fn timed<T: Real>(f: impl Fn() -> st4d::Result<Tensor<T>>, repeat: usize) -> Result<(Tensor<T>, f64), CliError> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeat.max(1) {
        let t0 = Instant::now();
        let y = f()?;
        best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        out = Some(y);
    }
    Ok((out.expect("at least one repetition"), best))
}

pub fn run_case<T: Real>(case: &BenchCase, repeat: usize, seed: u64) -> Result<BenchRow, CliError> {
    let s = &case.spec;
    let mut rng = Rng::new(seed);
    let mut xd = vec![case.batch, s.in_channels];
    xd.extend(&case.input);
    let x = rng.normal_tensor::<T>(&xd, 0.0, 1.0)?;
    let w = rng.normal_tensor::<T>(&s.weight_dims(), 0.0, 1.0)?;
    let b = rng.normal_tensor::<T>(&[s.out_channels], 0.0, 1.0)?;
    let (d, direct_ms) = timed(|| conv_forward(&x, &w, Some(&b), s, ConvPath::Direct), repeat)?;
    let (i, im2col_ms) = timed(|| conv_forward(&x, &w, Some(&b), s, ConvPath::Im2col), repeat)?;
    let scale = d.max_abs().as_f64().max(f64::MIN_POSITIVE);
    let diff = d
        .data()
        .iter()
        .zip(i.data())
        .map(|(a, c)| (a.as_f64() - c.as_f64()).abs())
        .fold(0.0, f64::max);
    let taps: usize = s.kernel.iter().product();
    Ok(BenchRow {
        direct_ms,
        im2col_ms,
        rel_err: diff / scale,
        exact: d.data() == i.data(),
        macs: (d.numel() * s.in_channels * taps) as f64,
    })
}

fn dims(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

pub fn run(specs: &[String], sweep: Option<&Path>, dtype: &str, repeat: usize) -> Result<(), CliError> {
    let mut lines: Vec<String> = specs.to_vec();
    if let Some(p) = sweep {
        let text = std::fs::read_to_string(p).map_err(|e| {
            CliError::Core(st4d::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })
        })?;
        lines.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from),
        );
    } else if specs.is_empty() {
        lines.extend(DEFAULT_SWEEP.iter().map(|s| s.to_string()));
    }
    let cases = lines.iter().map(|l| parse_case(l)).collect::<Result<Vec<_>, _>>()?;
    let mut failures = 0;
    for (n, case) in cases.iter().enumerate() {
        let row = match dtype {
            "f32" => run_case::<f32>(case, repeat, n as u64)?,
            "f64" => run_case::<f64>(case, repeat, n as u64)?,
            _ => return Err(CliError::Usage(format!("--dtype: expected f32 or f64, got '{dtype}'"))),
        };
        let pass = row.rel_err <= TOLERANCE;
        failures += usize::from(!pass);
        let s = &case.spec;
        println!(
            "bench rank={} batch={} in={} out={} input={} kernel={} stride={} pad={} dtype={dtype} direct_ms={:.3} im2col_ms={:.3} direct_gmacs={:.3} im2col_gmacs={:.3} rel_err={:.3e} exact={} pass={pass}",
            s.rank,
            case.batch,
            s.in_channels,
            s.out_channels,
            dims(&case.input),
            s.kernel[0],
            s.stride[0],
            s.padding[0],
            row.direct_ms,
            row.im2col_ms,
            row.macs / row.direct_ms / 1e6,
            row.macs / row.im2col_ms / 1e6,
            row.rel_err,
            row.exact
        );
    }
    if failures > 0 {
        return Err(CliError::Numerical(format!("{failures} case(s) exceed the path tolerance {TOLERANCE:e}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults() {
        for l in DEFAULT_SWEEP {
            parse_case(l).unwrap();
        }
        let c = parse_case("input=4x4x4").unwrap();
        assert_eq!(c.spec.rank, 3);
        assert!(parse_case("rank=4 input=4x4x4").is_err());
        assert!(parse_case("input=4x4x4 size=2").is_err());
        assert!(parse_case("kernel=3").is_err());
    }

    #[test]
    fn unit_kernel_single_channel_is_exact() {
        let c = parse_case("rank=4 in=1 out=2 input=3x3x3x3 kernel=1 pad=0").unwrap();
        let r = run_case::<f32>(&c, 1, 0).unwrap();
        assert!(r.exact, "rel_err {}", r.rel_err);
        // With several input channels the gemm sums in a different order.
        let c = parse_case("rank=4 in=3 out=2 input=3x3x3x3 kernel=1 pad=0").unwrap();
        assert!(run_case::<f32>(&c, 1, 0).unwrap().rel_err <= TOLERANCE);
    }
}
