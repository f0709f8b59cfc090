//! Mixed-radix encoding of joint (per-agent) actions into flat indices.

/// Number of joint assignments over the given per-agent set sizes.
pub fn joint_count(sizes: &[usize]) -> usize {
    sizes.iter().product()
}

/// Encode per-agent choices into a flat joint index (agent 0 is the most
/// significant digit).
pub fn encode(sizes: &[usize], parts: &[usize]) -> usize {
    debug_assert_eq!(sizes.len(), parts.len());
    let mut idx = 0;
    for (&size, &part) in sizes.iter().zip(parts) {
        debug_assert!(part < size);
        idx = idx * size + part;
    }
    idx
}

/// Decode a flat joint index into per-agent choices.
pub fn decode(sizes: &[usize], mut idx: usize) -> Vec<usize> {
    let mut parts = vec![0; sizes.len()];
    for (i, &size) in sizes.iter().enumerate().rev() {
        parts[i] = idx % size;
        idx /= size;
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let sizes = [2, 3, 4];
        for idx in 0..joint_count(&sizes) {
            assert_eq!(encode(&sizes, &decode(&sizes, idx)), idx);
        }
    }

    #[test]
    fn agent_zero_most_significant() {
        assert_eq!(encode(&[2, 2], &[1, 0]), 2);
        assert_eq!(decode(&[2, 2], 3), vec![1, 1]);
    }
}
