use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[sin(p/10000^(0/w)), cos(p/10000^(0/w)), sin(p/10000^(2/w)), ...]` for an
/// even width `w`.
pub fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width);
    for i in 0..width / 2 {
        let freq = 10000f64.powf((2 * i) as f64 / width as f64);
        let a = pos / freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// Sinusoidal positions for the decoder inputs, `[max_len, width]`.
pub fn positional_encoding(max_len: usize, width: usize) -> Result<Tensor> {
    if width % 2 != 0 || width == 0 {
        return Err(Error::Config(format!("positional encoding needs an even width, got {width}")));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let data = (0..max_len).flat_map(|p| sinusoid(p as f64, width)).collect();
    Ok(Tensor::from_parts(vec![max_len, width], data))
}
