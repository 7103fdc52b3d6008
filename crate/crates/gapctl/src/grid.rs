//! Lambda grid and seed list parsing.
//!
//! Grid values are handled as integer thousandths, so `0:1:0.1` yields
//! exactly `0.0, 0.1, ..., 1.0` with no accumulated drift.

const SCALE: f64 = 1000.0;

/// A parsed comma or range list. Wrapped so clap treats it as one value.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

fn to_milli(text: &str) -> Result<i64, String> {
    let t = text.trim();
    let x: f64 = t.parse().map_err(|_| format!("`{t}` is not a number"))?;
    if !x.is_finite() {
        return Err(format!("`{t}` is not finite"));
    }
    let scaled = x * SCALE;
    let m = scaled.round();
    if (scaled - m).abs() > 1e-6 {
        return Err(format!("`{t}` has more than 3 decimals"));
    }
    Ok(m as i64)
}

fn check_range(m: i64) -> Result<(), String> {
    if (0..=1000).contains(&m) {
        Ok(())
    } else {
        Err(format!("lambda {} is outside [0, 1]", m as f64 / SCALE))
    }
}

/// Parses a single lambda value, which must lie in [0, 1].
pub fn parse_lambda(text: &str) -> Result<f64, String> {
    let x: f64 = text.trim().parse().map_err(|_| format!("`{}` is not a number", text.trim()))?;
    if !(0.0..=1.0).contains(&x) {
        return Err(format!("lambda must be in [0, 1], got {x}"));
    }
    Ok(x)
}

/// Parses `start:end:step` or a comma list such as `0,0.25,1`.
pub fn parse_grid(text: &str) -> Result<List<f64>, String> {
    let milli = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, end, step] = parts[..] else {
            return Err(format!("`{text}` is not of the form start:end:step"));
        };
        let (start, end, step) = (to_milli(start)?, to_milli(end)?, to_milli(step)?);
        if step <= 0 {
            return Err("grid step must be positive".into());
        }
        if end < start {
            return Err(format!("grid end {} is below its start {}", end as f64 / SCALE, start as f64 / SCALE));
        }
        (0..).map(|i| start + i * step).take_while(|&m| m <= end).collect::<Vec<_>>()
    } else {
        text.split(',').map(to_milli).collect::<Result<Vec<_>, _>>()?
    };
    for &m in &milli {
        check_range(m)?;
    }
    let mut sorted = milli.clone();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(format!("lambda {} appears twice", w[0] as f64 / SCALE));
    }
    Ok(List(milli.into_iter().map(|m| m as f64 / SCALE).collect()))
}

/// Parses a comma list of non-negative integers.
pub fn parse_u64_list(text: &str) -> Result<List<u64>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| format!("`{}` is not a non-negative integer", s.trim())))
        .collect::<Result<_, _>>()
        .map(List)
}

/// Parses a comma list of sizes.
pub fn parse_usize_list(text: &str) -> Result<List<usize>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("`{}` is not a non-negative integer", s.trim())))
        .collect::<Result<_, _>>()
        .map(List)
}
