//! Recomputes the Monte Carlo random-policy baselines and prints the table.

use tokenmoe::envs::{format_baselines, random_score, reference_score, Baseline, Game, BASELINE_EPISODES, BASELINE_SEED};

fn main() -> tokenmoe::Result<()> {
    let rows = Game::ALL
        .into_iter()
        .map(|game| {
            Ok(Baseline {
                game,
                random_score: random_score(game, BASELINE_EPISODES, BASELINE_SEED)?,
                reference_score: reference_score(game),
            })
        })
        .collect::<tokenmoe::Result<Vec<_>>>()?;
    print!("{}", format_baselines(&rows));
    Ok(())
}
