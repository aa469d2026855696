use super::feature_map::FeatureMap;
use crate::error::{Error, Result};

/// Mean of the base map and its stylized variants, per component.
pub fn fuse_multi_style(base: &FeatureMap, stylized: &[FeatureMap]) -> Result<FeatureMap> {
    if let Some(bad) = stylized.iter().find(|m| !m.same_shape(base)) {
        return Err(Error::ShapeMismatch(format!(
            "stylized map {}x{}x{} vs base {}x{}x{}",
            bad.channels, bad.height, bad.width, base.channels, base.height, base.width
        )));
    }
    if stylized.is_empty() {
        return Ok(base.clone());
    }
    let norm = 1.0 / (1 + stylized.len()) as f64;
    let values = (0..base.values.len())
        .map(|i| {
            let s: f64 =
                base.values[i] as f64 + stylized.iter().map(|m| m.values[i] as f64).sum::<f64>();
            (s * norm) as f32
        })
        .collect();
    Ok(FeatureMap { values, ..*base })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: Vec<f32>) -> FeatureMap {
        FeatureMap::new(1, 1, v.len(), 16, 20, v).unwrap()
    }

    #[test]
    fn examples() {
        let base = map(vec![0.0, 1.5]);
        assert_eq!(fuse_multi_style(&base, &[]).unwrap(), base);
        assert_eq!(
            fuse_multi_style(&base, &[base.clone(), base.clone()]).unwrap(),
            base
        );
        let fused = fuse_multi_style(&map(vec![0.0]), &[map(vec![3.0]), map(vec![6.0])]).unwrap();
        assert_eq!(fused.values, vec![3.0]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(fuse_multi_style(&map(vec![0.0]), &[map(vec![1.0, 2.0])]).is_err());
    }
}
