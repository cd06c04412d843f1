//! Versioned binary checkpoint: basis, loading pre-activations, constraint
//! variables, predictor weights, hyperparameters and iteration history in one
//! archive with a deterministic byte layout (see `docs/checkpoint_format.md`).
//! Identical states serialize to identical bytes.

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::linalg::Mat;
use crate::optimizer::{Constraints, TrainState, Variant};
use crate::predictor::{NetConfig, PredictorParams};
use crate::srddl::{CoefficientTrack, ConstraintState, Dictionary, HyperParams, ObjectiveTerms};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SRDL";
const VERSION: u32 = 1;

const TRUTH_MAGIC: &[u8; 4] = b"SRGT";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn mat(&mut self, m: &Mat) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for v in m.iter() {
            self.f64(*v);
        }
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse("checkpoint: truncated file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::parse("checkpoint: bad utf-8"))
    }
    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::parse(format!("checkpoint: {e}")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Srddl => 0,
        Variant::NoDti => 1,
        Variant::Decoupled => 2,
    }
}

fn variant_from(code: u8) -> Result<Variant> {
    match code {
        0 => Ok(Variant::Srddl),
        1 => Ok(Variant::NoDti),
        2 => Ok(Variant::Decoupled),
        other => Err(Error::parse(format!("checkpoint: bad variant code {other}"))),
    }
}

fn write_predictor(w: &mut Writer, params: &PredictorParams) {
    w.u64(params.cfg.input as u64);
    w.u64(params.cfg.lstm_hidden as u64);
    w.u64(params.cfg.ann_hidden as u64);
    w.u64(params.cfg.outputs as u64);
    let tensors = params.tensors();
    w.u64(tensors.len() as u64);
    for t in tensors {
        w.f64s(t);
    }
}

fn read_predictor(r: &mut Reader) -> Result<PredictorParams> {
    let cfg = NetConfig {
        input: r.u64()? as usize,
        lstm_hidden: r.u64()? as usize,
        ann_hidden: r.u64()? as usize,
        outputs: r.u64()? as usize,
    };
    let mut params = PredictorParams::zeros(cfg);
    let count = r.u64()? as usize;
    {
        let mut tensors = params.tensors_mut();
        if tensors.len() != count {
            return Err(Error::parse(format!(
                "checkpoint: predictor has {count} tensors, expected {}",
                tensors.len()
            )));
        }
        for t in tensors.iter_mut() {
            let vals = r.f64s()?;
            if vals.len() != t.len() {
                return Err(Error::parse("checkpoint: predictor tensor size mismatch"));
            }
            t.copy_from_slice(&vals);
        }
    }
    Ok(params)
}

pub fn serialize_state(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(variant_code(state.variant));
    w.u64(state.seed);
    w.u64(state.iterations as u64);
    let hp_json = serde_json::to_string(&state.hp).map_err(|e| Error::parse(e.to_string()))?;
    w.string(&hp_json);

    w.mat(&state.dictionary.b);

    w.u64(state.tracks.len() as u64);
    for t in &state.tracks {
        w.string(&t.subject_id);
        w.mat(&t.c_hat);
    }

    match &state.constraints {
        Constraints::PerWindow(c) => {
            w.u8(0);
            w.u64(c.d.len() as u64);
            for n in 0..c.d.len() {
                w.u64(c.d[n].len() as u64);
                for t in 0..c.d[n].len() {
                    w.mat(&c.d[n][t]);
                    w.mat(&c.lambda[n][t]);
                }
            }
        }
        Constraints::Global { d, lambda } => {
            w.u8(1);
            w.mat(d);
            w.mat(lambda);
        }
    }

    write_predictor(&mut w, &state.predictor);

    w.u64(state.objective_history.len() as u64);
    for o in &state.objective_history {
        w.f64(o.data);
        w.f64(o.net);
        w.f64(o.dual);
        w.f64(o.penalty);
    }
    w.f64s(&state.residual_history);
    w.f64s(&state.repaired_residual_history);
    w.f64s(&state.net_loss_history);

    match &state.aborted {
        Some(msg) => {
            w.u8(1);
            w.string(msg);
        }
        None => w.u8(0),
    }
    Ok(w.buf)
}

pub fn deserialize_state(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::parse("checkpoint: bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(format!(
            "checkpoint: unsupported version {version} (expected {VERSION})"
        )));
    }
    let variant = variant_from(r.u8()?)?;
    let seed = r.u64()?;
    let iterations = r.u64()? as usize;
    let hp: HyperParams =
        serde_json::from_str(&r.string()?).map_err(|e| Error::parse(format!("checkpoint hp: {e}")))?;

    let b = r.mat()?;

    let n_tracks = r.u64()? as usize;
    let mut tracks = Vec::with_capacity(n_tracks);
    for _ in 0..n_tracks {
        let subject_id = r.string()?;
        let c_hat = r.mat()?;
        tracks.push(CoefficientTrack { subject_id, c_hat });
    }

    let constraints = match r.u8()? {
        0 => {
            let n = r.u64()? as usize;
            let mut d = Vec::with_capacity(n);
            let mut lambda = Vec::with_capacity(n);
            for _ in 0..n {
                let t_n = r.u64()? as usize;
                let mut dn = Vec::with_capacity(t_n);
                let mut ln = Vec::with_capacity(t_n);
                for _ in 0..t_n {
                    dn.push(r.mat()?);
                    ln.push(r.mat()?);
                }
                d.push(dn);
                lambda.push(ln);
            }
            Constraints::PerWindow(ConstraintState { d, lambda })
        }
        1 => Constraints::Global {
            d: r.mat()?,
            lambda: r.mat()?,
        },
        other => return Err(Error::parse(format!("checkpoint: bad constraint kind {other}"))),
    };

    let predictor = read_predictor(&mut r)?;

    let n_obj = r.u64()? as usize;
    let mut objective_history = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        objective_history.push(ObjectiveTerms {
            data: r.f64()?,
            net: r.f64()?,
            dual: r.f64()?,
            penalty: r.f64()?,
        });
    }
    let residual_history = r.f64s()?;
    let repaired_residual_history = r.f64s()?;
    let net_loss_history = r.f64s()?;
    let aborted = if r.u8()? == 1 { Some(r.string()?) } else { None };

    Ok(TrainState {
        dictionary: Dictionary { b },
        tracks,
        constraints,
        predictor,
        hp,
        variant,
        seed,
        iterations,
        objective_history,
        residual_history,
        repaired_residual_history,
        net_loss_history,
        aborted,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    atomic_write(path, &serialize_state(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    deserialize_state(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Ground-truth archive (simulate output)
// ---------------------------------------------------------------------------

pub fn serialize_ground_truth(truth: &crate::synth::GroundTruth, cfg_json: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(TRUTH_MAGIC);
    w.u32(VERSION);
    w.string(cfg_json);
    w.mat(&truth.basis);
    w.u64(truth.tracks.len() as u64);
    for t in &truth.tracks {
        w.mat(t);
    }
    write_predictor(&mut w, &truth.gen_params);
    w.buf
}

pub fn deserialize_ground_truth(bytes: &[u8]) -> Result<(crate::synth::GroundTruth, String)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TRUTH_MAGIC {
        return Err(Error::parse("ground truth archive: bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(format!("ground truth archive: unsupported version {version}")));
    }
    let cfg_json = r.string()?;
    let basis = r.mat()?;
    let n = r.u64()? as usize;
    let mut tracks = Vec::with_capacity(n);
    for _ in 0..n {
        tracks.push(r.mat()?);
    }
    let gen_params = read_predictor(&mut r)?;
    Ok((
        crate::synth::GroundTruth {
            basis,
            tracks,
            gen_params,
        },
        cfg_json,
    ))
}

pub fn save_ground_truth(truth: &crate::synth::GroundTruth, cfg_json: &str, path: &Path) -> Result<()> {
    atomic_write(path, &serialize_ground_truth(truth, cfg_json))
}

pub fn load_ground_truth(path: &Path) -> Result<(crate::synth::GroundTruth, String)> {
    deserialize_ground_truth(&std::fs::read(path)?)
}
