//! Rendezvous (highest-random-weight) routing of devices to gateway nodes.

use guirl_core::util::fnv1a64;

/// Weight of `node` for `key`: FNV-1a over `node ‖ 0x00 ‖ key`, passed
/// through the MurmurHash3 64-bit finalizer so that keys differing in their
/// last bytes still spread evenly.
pub fn weight(node: &str, key: &str) -> u64 {
    let mut h = fnv1a64(&[node.as_bytes(), &[0], key.as_bytes()]);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

/// The node with the largest weight for `key`; ties go to the earlier node.
/// `None` only when `nodes` is empty.
pub fn route<'a, S: AsRef<str>>(key: &str, nodes: &'a [S]) -> Option<&'a str> {
    let mut best: Option<(u64, &str)> = None;
    for n in nodes {
        let w = weight(n.as_ref(), key);
        if best.is_none_or(|(bw, _)| w > bw) {
            best = Some((w, n.as_ref()));
        }
    }
    best.map(|(_, n)| n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("node-{i}")).collect()
    }

    #[test]
    fn single_node_and_determinism() {
        assert_eq!(route("dev-1", &["a"]), Some("a"));
        assert_eq!(route::<&str>("dev-1", &[]), None);
        let nodes = names(4);
        assert_eq!(route("dev-9", &nodes), route("dev-9", &nodes));
    }

    #[test]
    fn load_is_balanced() {
        let nodes = names(5);
        let mut load = [0usize; 5];
        for d in 0..1000 {
            let n = route(&format!("dev-{d}"), &nodes).unwrap();
            load[nodes.iter().position(|x| x == n).unwrap()] += 1;
        }
        let (max, min) = (*load.iter().max().unwrap(), *load.iter().min().unwrap());
        assert!(max as f64 / min as f64 <= 1.5, "{load:?}");
    }
}
