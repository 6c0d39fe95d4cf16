//! Row-major run-length coding of binary masks: `[value, run, value, run, ...]`
//! starting with the value of pixel (0,0).

use guidedseg_core::labels::LabelMap;

pub fn encode(mask: &LabelMap) -> Vec<u32> {
    let mut out = Vec::new();
    let mut pixels = mask.data().iter().map(|&v| u32::from(v != 0));
    let Some(mut current) = pixels.next() else {
        return out;
    };
    let mut run = 1;
    for v in pixels {
        if v == current {
            run += 1;
        } else {
            out.extend([current, run]);
            current = v;
            run = 1;
        }
    }
    out.extend([current, run]);
    out
}

/// Inverse of [`encode`]; `None` unless the pairs are well formed, the
/// values binary and the runs cover exactly `height * width` pixels.
pub fn decode(rle: &[u32], height: usize, width: usize) -> Option<LabelMap> {
    if rle.len() % 2 != 0 {
        return None;
    }
    let mut data = Vec::with_capacity(height * width);
    for pair in rle.chunks_exact(2) {
        let (v, run) = (pair[0], pair[1] as usize);
        if v > 1 || run == 0 || data.len() + run > height * width {
            return None;
        }
        data.resize(data.len() + run, v as u8);
    }
    LabelMap::new(height, width, data).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_start_at_origin() {
        let m = LabelMap::new(2, 3, vec![1, 1, 0, 0, 0, 1]).unwrap();
        assert_eq!(encode(&m), vec![1, 2, 0, 3, 1, 1]);
        assert_eq!(decode(&encode(&m), 2, 3).unwrap(), m);
        let zeros = LabelMap::filled(2, 2, 0);
        assert_eq!(encode(&zeros), vec![0, 4]);
    }

    #[test]
    fn malformed_runs_rejected() {
        assert!(decode(&[1, 2, 0], 1, 3).is_none());
        assert!(decode(&[1, 2], 1, 3).is_none());
        assert!(decode(&[2, 3], 1, 3).is_none());
        assert!(decode(&[1, 0, 0, 3], 1, 3).is_none());
    }
}
