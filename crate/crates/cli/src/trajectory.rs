use novelty_sac::rollout::Rollout;
use novelty_sac::{Corridor, Env};

use crate::error::{CliError, Result};

const MAGIC: &str = "# novelty-sac trajectory v1";
pub const HEADER: &str = "episode,step,x,y,action_x,action_y,reward,controller";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryHeader {
    pub config_hash: String,
    pub env_fingerprint: String,
    pub policy: usize,
    pub seed: u64,
    pub blockades: Vec<Corridor>,
}

/// One environment step: the position before `action` and its reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub step: usize,
    pub position: [f64; 2],
    pub action: [f64; 2],
    pub reward: f64,
    pub controller: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub header: TrajectoryHeader,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryFile {
    pub fn from_rollouts(header: TrajectoryHeader, rollouts: &[Rollout], controller: &str) -> Self {
        let mut rows = Vec::new();
        for (episode, r) in rollouts.iter().enumerate() {
            for t in 0..r.len() {
                rows.push(TrajectoryRow {
                    episode,
                    step: t,
                    position: r.positions[t],
                    action: r.actions[t],
                    reward: r.rewards[t],
                    controller: controller.to_string(),
                });
            }
        }
        Self { header, rows }
    }

    pub fn to_text(&self) -> String {
        let h = &self.header;
        let blockades = if h.blockades.is_empty() {
            "none".to_string()
        } else {
            h.blockades.iter().map(|c| c.name()).collect::<Vec<_>>().join(";")
        };
        let mut out = format!(
            "{MAGIC}\n# config_hash={}\n# env_fingerprint={}\n# policy={}\n# seed={}\n# blockades={blockades}\n{HEADER}\n",
            h.config_hash, h.env_fingerprint, h.policy, h.seed
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.episode, r.step, r.position[0], r.position[1], r.action[0], r.action[1], r.reward, r.controller
            ));
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(format!("line 1: expected `{MAGIC}`")),
        }
        let mut meta = |key: &str| -> std::result::Result<String, String> {
            let (n, line) = lines.next().ok_or_else(|| format!("missing `# {key}=` line"))?;
            line.strip_prefix(&format!("# {key}="))
                .map(str::to_string)
                .ok_or_else(|| format!("line {}: expected `# {key}=`", n + 1))
        };
        let config_hash = meta("config_hash")?;
        let env_fingerprint = meta("env_fingerprint")?;
        let policy = meta("policy")?.parse().map_err(|_| "bad policy index".to_string())?;
        let seed = meta("seed")?.parse().map_err(|_| "bad seed".to_string())?;
        let blockades = match meta("blockades")?.as_str() {
            "none" => Vec::new(),
            list => list
                .split(';')
                .map(|c| c.parse::<Corridor>().map_err(|e| e.to_string()))
                .collect::<std::result::Result<_, _>>()?,
        };
        match lines.next() {
            Some((_, l)) if l == HEADER => {}
            Some((n, _)) => return Err(format!("line {}: expected `{HEADER}`", n + 1)),
            None => return Err("missing column header".into()),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |what: &str| format!("line {}: {what}", n + 1);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err("expected 8 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
            rows.push(TrajectoryRow {
                episode: int(f[0])?,
                step: int(f[1])?,
                position: [num(f[2])?, num(f[3])?],
                action: [num(f[4])?, num(f[5])?],
                reward: num(f[6])?,
                controller: f[7].to_string(),
            });
        }
        Ok(Self {
            header: TrajectoryHeader {
                config_hash,
                env_fingerprint,
                policy,
                seed,
                blockades,
            },
            rows,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(|detail| CliError::Parse {
            path: path.to_path_buf(),
            detail,
        })
    }

    /// Per-episode position sequences tagged with their controller.
    pub fn paths(&self) -> Vec<(String, Vec<[f64; 2]>)> {
        let mut out: Vec<(String, Vec<[f64; 2]>)> = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            if i == 0 || self.rows[i - 1].episode != r.episode {
                out.push((r.controller.clone(), Vec::new()));
            }
            out.last_mut().expect("pushed above").1.push(r.position);
        }
        out
    }

    fn configured(&self, env: &Env) -> Env {
        let mut env = env.clone();
        for c in Corridor::ALL {
            env.set_blockade(c, self.header.blockades.contains(&c));
        }
        env
    }

    /// Feeds every recorded action back through `env` and checks rewards and
    /// successor positions bit for bit.
    pub fn replay(&self, env: &Env) -> std::result::Result<(), String> {
        if env.geometry().fingerprint() != self.header.env_fingerprint {
            return Err("environment fingerprint differs".into());
        }
        let env = self.configured(env);
        for (i, r) in self.rows.iter().enumerate() {
            let state = novelty_sac::EnvState {
                position: r.position,
                steps_elapsed: r.step,
            };
            let res = env.transition(&state, &r.action);
            if res.reward.to_bits() != r.reward.to_bits() {
                return Err(format!("row {i}: reward {} replays as {}", r.reward, res.reward));
            }
            if let Some(next) = self.rows.get(i + 1).filter(|n| n.episode == r.episode) {
                if next.position != res.next_state.position {
                    return Err(format!("row {}: position does not follow from row {i}", i + 1));
                }
            }
        }
        Ok(())
    }
}
