//! Parameter server: named tensors with server-side Adam, versioned per
//! tensor. Workers push raw gradients; the server owns the optimizer
//! state, so concurrent workers share one optimizer trajectory per
//! tensor (the ASGD discipline).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use gear_core::optim::{AdamHyper, AdamState};
use gear_core::wire::{self, Message, PulledParam};
use gear_core::Tensor;

use crate::TrainError;

struct ParamEntry {
    value: Tensor,
    adam: AdamState,
    version: u64,
}

/// One server's shard. All methods take `&self`; atomicity is per named
/// tensor (each entry has its own lock), so a pull never observes a torn
/// update and pushes to different tensors never serialize on each other.
pub struct ParamServer {
    hyper: AdamHyper,
    entries: RwLock<HashMap<String, Arc<Mutex<ParamEntry>>>>,
    registration_order: Mutex<Vec<String>>,
}

impl ParamServer {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            entries: RwLock::new(HashMap::new()),
            registration_order: Mutex::new(Vec::new()),
        }
    }

    pub fn register(&self, name: &str, init: Tensor) -> Result<(), TrainError> {
        let mut entries = self.entries.write();
        if entries.contains_key(name) {
            return Err(TrainError::DuplicateParam { name: name.to_string() });
        }
        let adam = AdamState::new(init.shape().to_vec(), self.hyper);
        entries.insert(
            name.to_string(),
            Arc::new(Mutex::new(ParamEntry { value: init, adam, version: 0 })),
        );
        self.registration_order.lock().push(name.to_string());
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<Arc<Mutex<ParamEntry>>, TrainError> {
        self.entries
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| TrainError::UnknownParam { name: name.to_string() })
    }

    pub fn pull(&self, names: &[String]) -> Result<Vec<PulledParam>, TrainError> {
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let entry = self.entry(name)?;
            let entry = entry.lock();
            out.push(PulledParam {
                name: name.clone(),
                version: entry.version,
                tensor: entry.value.clone(),
            });
        }
        Ok(out)
    }

    /// Applies one Adam step with `grad` and returns the new version.
    pub fn push_grad(&self, name: &str, grad: &Tensor) -> Result<u64, TrainError> {
        let entry = self.entry(name)?;
        let mut entry = entry.lock();
        let ParamEntry { value, adam, version } = &mut *entry;
        adam.apply(value, grad)?;
        *version += 1;
        Ok(*version)
    }

    /// Optimizer step count for a tensor (test introspection).
    pub fn adam_t(&self, name: &str) -> Result<u64, TrainError> {
        Ok(self.entry(name)?.lock().adam.t)
    }

    pub fn registered_names(&self) -> Vec<String> {
        self.registration_order.lock().clone()
    }

    /// Every tensor in registration order, for snapshots.
    pub fn snapshot(&self) -> Vec<PulledParam> {
        let names = self.registered_names();
        self.pull(&names).expect("registered names are pullable")
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<(), TrainError> {
        w.write_all(&wire::encode_snapshot(&self.snapshot()))?;
        Ok(())
    }

    /// Serves one decoded wire message; `Some` is the reply to send back.
    pub fn handle(&self, msg: &Message) -> Result<Option<Message>, TrainError> {
        match msg {
            Message::ParamPullReq { names } => {
                Ok(Some(Message::ParamPullResp { params: self.pull(names)? }))
            }
            Message::ParamGradPush { name, grad } => {
                self.push_grad(name, grad)?;
                Ok(None)
            }
            Message::Shutdown => Ok(None),
            other => Err(TrainError::Protocol(format!(
                "parameter server cannot serve message kind {}",
                other.kind()
            ))),
        }
    }
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Vec<PulledParam>, TrainError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Ok(wire::decode_snapshot(&bytes)?)
}

/// Round-robin shard assignment over the canonical registration order:
/// tensor i lives on server `i mod num_servers`. Every worker derives the
/// same map from the same ordered name list.
pub fn shard_assignments(names: &[String], num_servers: usize) -> HashMap<String, usize> {
    assert!(num_servers >= 1, "need at least one parameter server");
    names.iter().enumerate().map(|(i, n)| (n.clone(), i % num_servers)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    fn server() -> ParamServer {
        ParamServer::new(AdamHyper::default())
    }

    #[test]
    fn register_then_pull_is_version_zero() {
        let ps = server();
        let init = Tensor::vector(vec![1.0, 2.0]);
        ps.register("w", init.clone()).unwrap();
        let pulled = ps.pull(&["w".into()]).unwrap();
        assert_eq!(pulled.len(), 1);
        assert_eq!(pulled[0].version, 0);
        assert_eq!(pulled[0].tensor, init);
    }

    #[test]
    fn duplicate_register_is_rejected() {
        let ps = server();
        ps.register("w", Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(
            ps.register("w", Tensor::vector(vec![0.0])),
            Err(TrainError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn hundred_registrations_all_pullable() {
        let ps = server();
        let names: Vec<String> = (0..100).map(|i| format!("p{i}")).collect();
        for (i, n) in names.iter().enumerate() {
            ps.register(n, Tensor::vector(vec![i as f32])).unwrap();
        }
        let pulled = ps.pull(&names).unwrap();
        assert_eq!(pulled.len(), 100);
        for (i, p) in pulled.iter().enumerate() {
            assert_eq!(p.tensor.data(), &[i as f32]);
        }
        assert_eq!(ps.registered_names(), names);
    }

    #[test]
    fn empty_pull_is_empty() {
        assert!(server().pull(&[]).unwrap().is_empty());
    }

    #[test]
    fn unknown_name_is_an_error() {
        let ps = server();
        assert!(matches!(ps.pull(&["x".into()]), Err(TrainError::UnknownParam { .. })));
        assert!(matches!(
            ps.push_grad("x", &Tensor::vector(vec![0.0])),
            Err(TrainError::UnknownParam { .. })
        ));
    }

    #[test]
    fn version_counts_pushes() {
        let ps = server();
        ps.register("w", Tensor::vector(vec![1.0])).unwrap();
        for k in 1..=5u64 {
            assert_eq!(ps.push_grad("w", &Tensor::vector(vec![0.1])).unwrap(), k);
        }
        assert_eq!(ps.pull(&["w".into()]).unwrap()[0].version, 5);
    }

    #[test]
    fn zero_grad_keeps_value_but_advances_version_and_t() {
        let ps = server();
        let init = Tensor::vector(vec![0.5, -0.5]);
        ps.register("w", init.clone()).unwrap();
        let v = ps.push_grad("w", &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(v, 1);
        assert_eq!(ps.pull(&["w".into()]).unwrap()[0].tensor, init);
        assert_eq!(ps.adam_t("w").unwrap(), 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ps = server();
        ps.register("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(ps.push_grad("w", &Tensor::vector(vec![1.0])).is_err());
        assert_eq!(ps.pull(&["w".into()]).unwrap()[0].version, 0, "failed push must not bump");
    }

    #[test]
    fn sequential_pushes_match_f64_adam_reference() {
        let hyper = AdamHyper { lr: 1e-2, ..Default::default() };
        let ps = ParamServer::new(hyper);
        let init = vec![1.0f32, -2.0, 0.5];
        ps.register("w", Tensor::vector(init.clone())).unwrap();
        let g1 = vec![0.3f32, -0.1, 0.2];
        let g2 = vec![-0.2f32, 0.4, 0.1];
        ps.push_grad("w", &Tensor::vector(g1.clone())).unwrap();
        ps.push_grad("w", &Tensor::vector(g2.clone())).unwrap();

        let mut reference = gear_refmath::RefAdam::new(3, 1e-2, 0.9, 0.999, 1e-8);
        let mut want = gear_refmath::widen(&init);
        reference.step(&mut want, &gear_refmath::widen(&g1));
        reference.step(&mut want, &gear_refmath::widen(&g2));
        let got = gear_refmath::widen(ps.pull(&["w".into()]).unwrap()[0].tensor.data());
        let err = gear_refmath::max_rel_err(&got, &want, 1e-9);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn concurrent_zero_grad_pushes_count_exactly() {
        let ps = Arc::new(server());
        ps.register("w", Tensor::vector(vec![1.0])).unwrap();
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let ps = Arc::clone(&ps);
                thread::spawn(move || {
                    for _ in 0..100 {
                        ps.push_grad("w", &Tensor::vector(vec![0.0])).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(ps.pull(&["w".into()]).unwrap()[0].version, 800);
        assert_eq!(ps.adam_t("w").unwrap(), 800);
        assert_eq!(ps.pull(&["w".into()]).unwrap()[0].tensor.data(), &[1.0]);
    }

    #[test]
    fn pulls_never_observe_torn_updates() {
        // All elements start equal and every push applies an identical
        // per-element update, so any intermediate value is elementwise
        // constant. A torn read would mix two states.
        let ps = Arc::new(ParamServer::new(AdamHyper { lr: 1e-2, ..Default::default() }));
        ps.register("w", Tensor::vector(vec![1.0; 512])).unwrap();
        let writer = {
            let ps = Arc::clone(&ps);
            thread::spawn(move || {
                for i in 0..500 {
                    let g = if i % 2 == 0 { 0.5 } else { -0.5 };
                    ps.push_grad("w", &Tensor::vector(vec![g; 512])).unwrap();
                }
            })
        };
        let readers: Vec<_> = (0..4)
            .map(|_| {
                let ps = Arc::clone(&ps);
                thread::spawn(move || {
                    for _ in 0..300 {
                        let t = &ps.pull(&["w".into()]).unwrap()[0].tensor;
                        let first = t.data()[0];
                        assert!(
                            t.data().iter().all(|&v| v == first),
                            "torn read: {:?} vs {first}",
                            t.data().iter().find(|&&v| v != first)
                        );
                    }
                })
            })
            .collect();
        writer.join().unwrap();
        for r in readers {
            r.join().unwrap();
        }
    }

    #[test]
    fn handle_dispatches_wire_messages() {
        let ps = server();
        ps.register("w", Tensor::vector(vec![2.0])).unwrap();
        let resp = ps
            .handle(&Message::ParamPullReq { names: vec!["w".into()] })
            .unwrap()
            .expect("pull must reply");
        match resp {
            Message::ParamPullResp { params } => {
                assert_eq!(params[0].name, "w");
                assert_eq!(params[0].version, 0);
            }
            other => panic!("unexpected reply {other:?}"),
        }
        let none = ps
            .handle(&Message::ParamGradPush { name: "w".into(), grad: Tensor::vector(vec![0.0]) })
            .unwrap();
        assert!(none.is_none());
        assert_eq!(ps.pull(&["w".into()]).unwrap()[0].version, 1);
        assert!(ps.handle(&Message::InferReq { image_id: 0 }).is_err());
    }

    #[test]
    fn snapshot_round_trips_through_files() {
        let ps = server();
        ps.register("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        ps.register("b", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        ps.push_grad("a", &Tensor::vector(vec![0.5, 0.5])).unwrap();

        let mut bytes = Vec::new();
        ps.write_snapshot(&mut bytes).unwrap();
        let restored = read_snapshot(&mut bytes.as_slice()).unwrap();
        assert_eq!(restored, ps.snapshot());
        assert_eq!(restored[0].name, "a");
        assert_eq!(restored[0].version, 1);
        assert_eq!(restored[1].version, 0);
    }

    #[test]
    fn shards_assign_round_robin() {
        let names: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let assign = shard_assignments(&names, 2);
        assert_eq!(assign["p0"], 0);
        assert_eq!(assign["p1"], 1);
        assert_eq!(assign["p2"], 0);
        assert_eq!(assign["p3"], 1);
        assert_eq!(assign["p4"], 0);
        let single = shard_assignments(&names, 1);
        assert!(single.values().all(|&s| s == 0));
    }
}
