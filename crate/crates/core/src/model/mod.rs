//! The unified cross-media keyphrase model.

pub mod attention;
pub mod encoder;
pub mod predictor;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::instance::{EncodedPost, Label};
use crate::data::vocab::{Vocabulary, BOS_ID, EOS, UNK_ID};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub use attention::{AttentionRecord, Banks, CoAttentionStack, Direction, M3hParams};
pub use encoder::{BiGruParams, GruParams, TextEncoding};
pub use predictor::{build_beta, top_k, unify, Aggregation, CopyIndex, ExtendedVocab};

/// Model dimensions and decoding limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_emb: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub l_text: usize,
    pub l_vis: usize,
    pub l_attr: usize,
    /// Feed-forward inner width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub visual_dim: usize,
    /// Classifier predictions fed to the aggregation path.
    pub top_k: usize,
    pub max_decode_len: usize,
    /// Half-width of the uniform embedding initialisation.
    pub embedding_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 300,
            d_emb: 200,
            encoder_layers: 2,
            heads: 4,
            d_head: 64,
            l_text: 4,
            l_vis: 1,
            l_attr: 1,
            ffn_mult: 2,
            visual_dim: 512,
            top_k: 5,
            max_decode_len: 6,
            embedding_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_emb", self.d_emb),
            ("encoder_layers", self.encoder_layers),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("ffn_mult", self.ffn_mult),
            ("visual_dim", self.visual_dim),
            ("top_k", self.top_k),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return Err(Error::validation("d_model", "must be even and at least 2"));
        }
        Ok(())
    }

    pub fn ffn_inner(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn query_layers(&self, dir: Direction) -> usize {
        match dir {
            Direction::TextToVision | Direction::TextToAttribute => self.l_text,
            Direction::VisionToText => self.l_vis,
            Direction::AttributeToText => self.l_attr,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    encoder: BiGruParams,
    vis: (ParamId, ParamId),
    attr: (ParamId, ParamId),
    m3h: M3hParams,
    cls1: (ParamId, ParamId),
    cls2: (ParamId, ParamId),
    decoder: GruParams,
    att_state: ParamId,
    att_memory: ParamId,
    att_bias: ParamId,
    att_v: ParamId,
    gen1: (ParamId, ParamId),
    gen2: (ParamId, ParamId),
    switch: (ParamId, ParamId),
}

/// Encoder, fusion and predictor parameters with their layout.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    n_gen: usize,
    n_cls: usize,
}

/// Per-instance encoder and fusion outputs.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub text: TextEncoding,
    pub banks: Banks,
    pub c_fuse: Var,
}

/// Everything the decoder needs for one instance.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub encoded: Encoded,
    pub logits: Var,
    pub retrieved: Vec<usize>,
    pub retrieved_tokens: Vec<String>,
    pub beta: Var,
    pub ext: ExtendedVocab,
    pub copy: CopyIndex,
    pub agg: Aggregation,
    memory: Var,
}

/// Decoder outputs of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: Var,
    pub alpha: Var,
    pub p_gen: Var,
    pub lambda: Var,
    pub p_unf: Var,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, n_gen: usize, n_cls: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_gen <= UNK_ID || n_cls == 0 {
            return Err(Error::validation("vocabulary", "generation or label vocabulary too small"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, de) = (config.d_model, config.d_emb);
        let rng = &mut rng;
        let embedding = s.init("embedding", vec![n_gen, de], Init::Uniform(config.embedding_init), rng)?;
        let encoder = BiGruParams::register(&mut s, de, d, config.encoder_layers, rng)?;
        let vis = (
            s.init("vis.w", vec![config.visual_dim, d], Init::FanIn, rng)?,
            s.init("vis.b", vec![1, d], Init::Zeros, rng)?,
        );
        let attr = (
            s.init("attr.w", vec![de, d], Init::FanIn, rng)?,
            s.init("attr.b", vec![1, d], Init::Zeros, rng)?,
        );
        let mut stacks = Vec::new();
        for dir in Direction::ALL {
            stacks.push(CoAttentionStack::register(
                &mut s,
                dir,
                config.query_layers(dir),
                d,
                config.heads,
                config.d_head,
                config.ffn_inner(),
                rng,
            )?);
        }
        let m3h = M3hParams {
            stacks,
            w_f: s.init("m3h.fuse.w", vec![d, d], Init::FanIn, rng)?,
            b_f: s.init("m3h.fuse.b", vec![1, d], Init::Zeros, rng)?,
        };
        let cls1 = (
            s.init("cls.w1", vec![d, d], Init::FanIn, rng)?,
            s.init("cls.b1", vec![1, d], Init::Zeros, rng)?,
        );
        let cls2 = (
            s.init("cls.w2", vec![d, n_cls], Init::FanIn, rng)?,
            s.init("cls.b2", vec![1, n_cls], Init::Zeros, rng)?,
        );
        let decoder = GruParams::register(&mut s, "dec.gru", de, d, rng)?;
        let att_state = s.init("dec.att.w_state", vec![d, d], Init::FanIn, rng)?;
        let att_memory = s.init("dec.att.w_memory", vec![d, d], Init::FanIn, rng)?;
        let att_bias = s.init("dec.att.b", vec![1, d], Init::Zeros, rng)?;
        let att_v = s.init("dec.att.v", vec![d, 1], Init::FanIn, rng)?;
        let ct = de + 2 * d;
        let gen1 = (
            s.init("dec.gen.w1", vec![ct, d], Init::FanIn, rng)?,
            s.init("dec.gen.b1", vec![1, d], Init::Zeros, rng)?,
        );
        let gen2 = (
            s.init("dec.gen.w2", vec![d, n_gen], Init::FanIn, rng)?,
            s.init("dec.gen.b2", vec![1, n_gen], Init::Zeros, rng)?,
        );
        let switch = (
            s.init("dec.switch.w", vec![ct, 1], Init::FanIn, rng)?,
            s.init("dec.switch.b", vec![1, 1], Init::Zeros, rng)?,
        );
        Ok(Self {
            config,
            params: s,
            layout: Layout {
                embedding,
                encoder,
                vis,
                attr,
                m3h,
                cls1,
                cls2,
                decoder,
                att_state,
                att_memory,
                att_bias,
                att_v,
                gen1,
                gen2,
                switch,
            },
            n_gen,
            n_cls,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn gen_size(&self) -> usize {
        self.n_gen
    }

    pub fn cls_size(&self) -> usize {
        self.n_cls
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    /// The same model at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            n_gen: self.n_gen,
            n_cls: self.n_cls,
        }
    }

    /// Overwrites embedding rows from a text file of `word v_1 … v_{d_e}`
    /// lines. Returns the number of rows replaced.
    pub fn load_embeddings(&mut self, path: &Path, vocab: &Vocabulary) -> Result<usize> {
        let content = fs::read_to_string(path)?;
        let de = self.config.d_emb;
        let id = self.layout.embedding;
        let table = self.params.get_mut(id).data_mut();
        let mut replaced = 0;
        for (i, line) in content.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else {
                continue;
            };
            let values = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if values.len() != de {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {de} values, got {}", values.len()),
                });
            }
            if let Some(row) = vocab.gen.id(word) {
                for (dst, v) in table[row * de..(row + 1) * de].iter_mut().zip(&values) {
                    *dst = T::of_f64(*v);
                }
                replaced += 1;
            }
        }
        Ok(replaced)
    }

    fn p(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn affine(&self, tape: &mut Tape<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        encoder::affine(tape, &self.params, x, w, b)
    }

    /// Builds the memory banks and the fused context of a post.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        post: &EncodedPost,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Encoded> {
        let l = &self.layout;
        let text = encoder::encode_text(tape, &self.params, l.embedding, &l.encoder, &post.source_ids)?;
        let vision = match &post.visual {
            Some(v) => Some(encoder::project_visual(
                tape,
                &self.params,
                &v.cast(),
                l.vis.0,
                l.vis.1,
            )?),
            None => None,
        };
        let attribute = encoder::project_attributes(
            tape,
            &self.params,
            l.embedding,
            &post.attr_ids,
            l.attr.0,
            l.attr.1,
        )?;
        let banks = Banks {
            text: text.bank,
            vision,
            attribute,
        };
        let c_fuse = l.m3h.fuse(tape, &self.params, &banks, records)?;
        Ok(Encoded {
            text,
            banks,
            c_fuse,
        })
    }

    /// Classifier logits `tanh(c W_1 + b_1) W_2 + b_2`, shape `[1 × |V_cls|]`.
    pub fn classify(&self, tape: &mut Tape<T>, c_fuse: Var) -> Result<Var> {
        let h = self.affine(tape, c_fuse, self.layout.cls1)?;
        let h = tape.tanh(h);
        self.affine(tape, h, self.layout.cls2)
    }

    /// Encodes a post, runs the classifier and resolves copy sources.
    pub fn prepare(
        &self,
        tape: &mut Tape<T>,
        post: &EncodedPost,
        vocab: &Vocabulary,
        agg: Aggregation,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Prepared> {
        agg.check()?;
        if vocab.gen.len() != self.n_gen || vocab.cls.len() != self.n_cls {
            return Err(Error::dim(format!(
                "vocabulary sizes {}/{} do not match model sizes {}/{}",
                vocab.gen.len(),
                vocab.cls.len(),
                self.n_gen,
                self.n_cls
            )));
        }
        let encoded = self.encode(tape, post, records)?;
        let logits = self.classify(tape, encoded.c_fuse)?;
        let retrieved = top_k(&tape.value(logits).to_f64_vec(), self.config.top_k);
        let label_tokens: Vec<Vec<String>> = retrieved
            .iter()
            .map(|&r| vocab.cls.label(r).split_whitespace().map(String::from).collect())
            .collect();
        let lengths: Vec<usize> = label_tokens.iter().map(Vec::len).collect();
        let beta = build_beta(tape, logits, &retrieved, &lengths)?;
        let retrieved_tokens: Vec<String> = label_tokens.into_iter().flatten().collect();

        let no_tokens: &[String] = &[];
        let ext = ExtendedVocab::new(
            &vocab.gen,
            (if agg.a > 0.0 { post.source.as_slice() } else { no_tokens })
                .iter()
                .chain(if agg.b > 0.0 { retrieved_tokens.as_slice() } else { no_tokens }),
        );
        let resolve = |toks: &[String]| toks.iter().map(|t| ext.target_id(&vocab.gen, t)).collect();
        let copy = CopyIndex {
            source: resolve(&post.source),
            retrieved: resolve(&retrieved_tokens),
        };
        let memory = self.affine(
            tape,
            encoded.text.bank,
            (self.layout.att_memory, self.layout.att_bias),
        )?;
        Ok(Prepared {
            encoded,
            logits,
            retrieved,
            retrieved_tokens,
            beta,
            ext,
            copy,
            agg,
            memory,
        })
    }

    /// Decoder state before the first step.
    pub fn init_decoder(&self, prep: &Prepared) -> Var {
        prep.encoded.text.last
    }

    /// Feeds `input` (a generation id) and produces the step distributions.
    pub fn decode_step(
        &self,
        tape: &mut Tape<T>,
        prep: &Prepared,
        state: Var,
        input: usize,
    ) -> Result<StepOutput> {
        let l = &self.layout;
        let table = self.p(tape, l.embedding);
        let u = tape.gather_rows(table, &[input])?;
        let xp = l.decoder.project_inputs(tape, &self.params, u)?;
        let s = l.decoder.step(tape, &self.params, xp, state)?;

        let ws = self.p(tape, l.att_state);
        let sp = tape.matmul(s, ws)?;
        let e = tape.add(prep.memory, sp)?;
        let e = tape.tanh(e);
        let v = self.p(tape, l.att_v);
        let scores = tape.matmul(e, v)?;
        let len = tape.value(scores).numel();
        let scores = tape.reshape(scores, vec![1, len])?;
        let alpha = tape.softmax_last(scores)?;
        let c_text = tape.matmul(alpha, prep.encoded.text.bank)?;

        let ctx = tape.add(c_text, prep.encoded.c_fuse)?;
        let c_t = tape.concat(&[u, s, ctx])?;
        let g = self.affine(tape, c_t, l.gen1)?;
        let g = tape.tanh(g);
        let g = self.affine(tape, g, l.gen2)?;
        let p_gen = tape.softmax_last(g)?;
        let lam = self.affine(tape, c_t, l.switch)?;
        let lambda = tape.sigmoid(lam);
        let p_unf = unify(
            tape,
            p_gen,
            lambda,
            alpha,
            prep.beta,
            &prep.copy,
            prep.agg,
            prep.ext.len(),
        )?;
        Ok(StepOutput {
            state: s,
            alpha,
            p_gen,
            lambda,
            p_unf,
        })
    }

    /// Extended ids of `target` followed by the end marker.
    pub fn target_ids(&self, prep: &Prepared, vocab: &Vocabulary, target: &[String]) -> Vec<usize> {
        target
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(EOS))
            .map(|t| prep.ext.target_id(&vocab.gen, t))
            .collect()
    }

    /// Teacher-forced decoding over `target`; returns each step and the
    /// summed negative log-likelihood.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<T>,
        prep: &Prepared,
        vocab: &Vocabulary,
        target: &[String],
    ) -> Result<(Var, Vec<StepOutput>)> {
        let ids = self.target_ids(prep, vocab, target);
        let mut state = self.init_decoder(prep);
        let mut input = BOS_ID;
        let mut steps = Vec::with_capacity(ids.len());
        let mut picked = Vec::with_capacity(ids.len());
        for &y in &ids {
            let out = self.decode_step(tape, prep, state, input)?;
            picked.push(tape.gather(out.p_unf, &[y])?);
            steps.push(out);
            state = out.state;
            input = prep.ext.input_id(y);
        }
        let probs = tape.concat(&picked)?;
        let logs = tape.ln(probs);
        let total = tape.sum(logs);
        Ok((tape.scale(total, -T::one()), steps))
    }

    /// `−log P_cls(label)`, or `None` for unseen labels.
    pub fn classification_loss(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        label: Label,
    ) -> Result<Option<Var>> {
        match label {
            Label::Unseen => Ok(None),
            Label::Known(id) => {
                let ls = tape.log_softmax(logits);
                let lp = tape.gather(ls, &[id])?;
                Ok(Some(tape.scale(lp, -T::one())))
            }
        }
    }

    /// `−log P_cls(y) + γ·Σ_t −log P_unf(y_t)` for one instance.
    #[allow(clippy::too_many_arguments)]
    pub fn instance_loss(
        &self,
        tape: &mut Tape<T>,
        post: &EncodedPost,
        target: &[String],
        label: Label,
        vocab: &Vocabulary,
        agg: Aggregation,
        gamma: f64,
    ) -> Result<Var> {
        let prep = self.prepare(tape, post, vocab, agg, None)?;
        let (seq, _) = self.sequence_loss(tape, &prep, vocab, target)?;
        let seq = tape.scale(seq, T::of_f64(gamma));
        match self.classification_loss(tape, prep.logits, label)? {
            Some(cls) => tape.add(cls, seq),
            None => Ok(seq),
        }
    }
}
