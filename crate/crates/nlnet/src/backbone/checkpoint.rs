//! Network checkpointing on the NLNET1 container. The manifest's metadata
//! is the full [`NetworkSpec`], so a checkpoint rebuilds its own network.

use super::{build_network, Network, NetworkSpec};
use crate::container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::path::Path;

/// Write every parameter and batch-norm statistic, named, in visit order.
pub fn save_network<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
    net.visit(&mut |name, tensor, _| {
        arrays.push((name.to_string(), tensor.dims().to_vec(), tensor.data().to_vec()));
    });
    let borrowed: Vec<(String, Vec<usize>, &[T])> = arrays
        .iter()
        .map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice()))
        .collect();
    container::write(path, &net.spec, &borrowed)
}

/// Rebuild the network described by the checkpoint and load every tensor.
/// Shape mismatches, missing tensors, and unknown entries are all rejected.
pub fn load_network<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let c: container::Container<NetworkSpec> = container::read(path)?;
    let mut net: Network<T> = build_network(&c.meta, 1.0, 1.0, 0)?;
    let mut by_name: BTreeMap<String, &container::Entry> =
        c.entries.iter().map(|e| (e.name.clone(), e)).collect();
    let mut failure: Option<Error> = None;
    net.visit_mut(&mut |name, tensor, _| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.remove(name) else {
            failure = Some(Error::Container(format!("checkpoint missing tensor {name}")));
            return;
        };
        if entry.shape != tensor.dims() {
            failure = Some(Error::Container(format!(
                "checkpoint tensor {name} has shape {:?}, network wants {:?}",
                entry.shape,
                tensor.dims()
            )));
            return;
        }
        match c.array(entry) {
            Ok(values) => {
                for (dst, v) in tensor.data_mut().iter_mut().zip(values) {
                    *dst = T::lit(v);
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::Container(format!(
            "checkpoint entry {name} does not correspond to any network tensor"
        )));
    }
    Ok(net)
}

/// Read just the spec without building anything.
pub fn peek_spec(path: &Path) -> Result<NetworkSpec> {
    let c: container::Container<NetworkSpec> = container::read(path)?;
    Ok(c.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{insert_nonlocal, InsertPolicy, NonLocalSettings};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("nlnet-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.nlnet");
        let spec = NetworkSpec::micro(1, 2);
        let net: Network<f64> = build_network(&spec, 1.0, 1.0, 3).unwrap();
        let net = insert_nonlocal(&net, &InsertPolicy::One, &NonLocalSettings::default(), 4).unwrap();
        save_network(&net, &path).unwrap();
        let loaded: Network<f64> = load_network(&path).unwrap();
        let mut same = true;
        net.visit(&mut |name, t, _| {
            loaded.visit(&mut |n2, t2, _| {
                if n2 == name {
                    same &= t.bit_eq(t2);
                }
            });
        });
        assert!(same);

        // outputs agree bitwise too
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(vec![1, 2, 8, 8, 1], -1.0, 1.0, &mut rng);
        let a = net.clone().forward_eval(&x).unwrap();
        let b = loaded.clone().forward_eval(&x).unwrap();
        assert!(a.bit_eq(&b));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join(format!("nlnet-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.nlnet");
        let spec = NetworkSpec::micro(1, 2);
        let net: Network<f64> = build_network(&spec, 1.0, 1.0, 3).unwrap();
        save_network(&net, &path).unwrap();
        // rewrite with a doctored spec that changes the head width
        let mut c: crate::container::Container<NetworkSpec> = crate::container::read(&path).unwrap();
        c.meta.num_classes = 3;
        let arrays: Vec<(String, Vec<usize>, Vec<f64>)> = c
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), c.array(e).unwrap()))
            .collect();
        let borrowed: Vec<(String, Vec<usize>, &[f64])> = arrays
            .iter()
            .map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice()))
            .collect();
        crate::container::write(&path, &c.meta, &borrowed).unwrap();
        assert!(load_network::<f64>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
