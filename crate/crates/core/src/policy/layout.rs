/// Observation features carried by one observation token.
pub const OBS_CHUNK: usize = 10;

/// Number of observation tokens for `features` values.
pub fn obs_tokens(features: usize) -> usize {
    features.div_ceil(OBS_CHUNK).max(1)
}

/// One timestep: observation tokens followed by its action tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGroup {
    pub obs: Vec<f64>,
    pub action: Vec<u32>,
}

/// Prompt, instruction, then interleaved observation/action groups. The final
/// group's action tokens are the prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub prompt: Vec<u32>,
    pub instruction: Vec<u32>,
    pub groups: Vec<StepGroup>,
}

/// Token ids with the positions that carry observation embeddings and the
/// zero-padded feature chunk for each.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatSequence {
    pub tokens: Vec<u32>,
    pub obs_slots: Vec<usize>,
    pub obs: Vec<Vec<f64>>,
}

impl SequenceLayout {
    pub fn prefix_len(&self) -> usize {
        self.prompt.len() + self.instruction.len()
    }

    pub fn len(&self) -> usize {
        self.prefix_len()
            + self
                .groups
                .iter()
                .map(|g| obs_tokens(g.obs.len()) + g.action.len())
                .sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self, obs_token: u32) -> FlatSequence {
        let mut tokens = Vec::with_capacity(self.len());
        tokens.extend_from_slice(&self.prompt);
        tokens.extend_from_slice(&self.instruction);
        let mut obs_slots = Vec::with_capacity(self.groups.len());
        let mut obs = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            for i in 0..obs_tokens(g.obs.len()) {
                let mut chunk: Vec<f64> = g.obs.iter().skip(i * OBS_CHUNK).take(OBS_CHUNK).copied().collect();
                chunk.resize(OBS_CHUNK, 0.0);
                obs_slots.push(tokens.len());
                tokens.push(obs_token);
                obs.push(chunk);
            }
            tokens.extend_from_slice(&g.action);
        }
        FlatSequence { tokens, obs_slots, obs }
    }

    /// Position of the final group's last observation token, i.e. the
    /// position immediately before its action tokens.
    pub fn pre_action_position(&self) -> Option<usize> {
        self.groups.last().map(|g| self.len() - g.action.len() - 1)
    }

    /// `(position, target token)` pairs: the hidden state at `position`
    /// predicts the target.
    pub fn targets(&self) -> Vec<(usize, u32)> {
        match (self.groups.last(), self.pre_action_position()) {
            (Some(g), Some(start)) => g.action.iter().enumerate().map(|(j, &t)| (start + j, t)).collect(),
            _ => Vec::new(),
        }
    }
}
