//! Trajectory replay export: one tab-separated record per step for external
//! visualization. Column order is fixed by the header line.

use std::io::{self, Write};

use super::{RewardTerms, WorldState};

/// Write the header naming every column for a world with the given entity
/// counts and action width.
pub fn write_header<W: Write>(
    w: &mut W,
    n_cubes: usize,
    n_effectors: usize,
    action_dim: usize,
) -> io::Result<()> {
    let mut cols: Vec<String> = vec![
        "step".into(),
        "target".into(),
        "goal_x".into(),
        "goal_y".into(),
        "rho".into(),
        "reward".into(),
        "r_sparse".into(),
        "r_distance".into(),
        "r_curiosity".into(),
    ];
    for a in 0..action_dim {
        cols.push(format!("action_{a}"));
    }
    for i in 0..n_cubes {
        cols.push(format!("cube{i}_x"));
        cols.push(format!("cube{i}_y"));
        cols.push(format!("cube{i}_vx"));
        cols.push(format!("cube{i}_vy"));
        cols.push(format!("cube{i}_id"));
    }
    for j in 0..n_effectors {
        cols.push(format!("eff{j}_x"));
        cols.push(format!("eff{j}_y"));
        cols.push(format!("eff{j}_vx"));
        cols.push(format!("eff{j}_vy"));
    }
    writeln!(w, "{}", cols.join("\t"))
}

/// Write one step record matching [`write_header`]'s column order.
pub fn write_step<W: Write>(
    w: &mut W,
    state: &WorldState,
    action: &[f64],
    reward: f64,
    terms: &RewardTerms,
) -> io::Result<()> {
    let mut fields: Vec<String> = vec![
        state.step.to_string(),
        state.target.to_string(),
        format!("{}", state.goal[0]),
        format!("{}", state.goal[1]),
        format!("{}", terms.rho),
        format!("{reward}"),
        format!("{}", terms.sparse),
        format!("{}", terms.distance),
        format!("{}", terms.curiosity),
    ];
    for a in action {
        fields.push(format!("{a}"));
    }
    for (i, c) in state.cubes.iter().enumerate() {
        fields.push(format!("{}", c.pos[0]));
        fields.push(format!("{}", c.pos[1]));
        fields.push(format!("{}", c.vel[0]));
        fields.push(format!("{}", c.vel[1]));
        fields.push(format!("{}", state.cube_ids[i]));
    }
    for e in &state.effectors {
        fields.push(format!("{}", e.pos[0]));
        fields.push(format!("{}", e.pos[1]));
        fields.push(format!("{}", e.vel[0]));
        fields.push(format!("{}", e.vel[1]));
    }
    writeln!(w, "{}", fields.join("\t"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvConfig, RewardConfig};

    #[test]
    fn header_and_rows_have_matching_field_counts() {
        let mut env = Env::new(EnvConfig::default(), RewardConfig::default(), 0).unwrap();
        let mut buf = Vec::new();
        write_header(&mut buf, 3, 3, 6).unwrap();
        let act = vec![0.3; 6];
        let out = env.step(&act).unwrap();
        write_step(&mut buf, env.state(), &act, out.reward, &out.terms).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0].split('\t').count(),
            lines[1].split('\t').count(),
            "header and record column counts differ"
        );
    }
}
