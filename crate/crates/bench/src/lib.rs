//! Fixtures shared by the criterion benches.

use noma_core::phy::{
    compose_received, draw_channel_with, transmit_symbols, AccessMode, ChannelRealization, CodeConfig, FadingModel,
    FrameConfig, ModScheme, ReceivedGrid, UeTxConfig,
};
use noma_core::seqdesign::{self, GenerateOptions, PiKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One received NOMA frame with its inputs.
pub struct LinkFixture {
    pub frame: FrameConfig,
    pub ues: Vec<UeTxConfig>,
    pub channel: ChannelRealization,
    pub received: ReceivedGrid,
    pub blocks: Vec<Vec<u8>>,
}

/// `k` QPSK UEs with 20-byte blocks on the default 6-PRB frame, spread
/// length `l`, unit noise, per-UE SNR `snr_db`.
pub fn noma_fixture(k: usize, l: usize, snr_db: f64, seed: u64) -> LinkFixture {
    let sig = seqdesign::generate(k, l, PiKind::TotalSquaredCorrelation, GenerateOptions::default())
        .expect("signature set")
        .matrix;
    let frame = FrameConfig::new(AccessMode::NomaWsma { signatures: sig });
    let ues: Vec<UeTxConfig> = (0..k)
        .map(|s| UeTxConfig {
            power: 10f64.powf(snr_db / 10.0),
            signature: s,
            modulation: ModScheme::Qpsk,
            tbs_bytes: 20,
            code: CodeConfig::default(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channel = draw_channel_with(&frame, FadingModel::BlockFlat, &mut rng);
    let blocks: Vec<Vec<u8>> = ues
        .iter()
        .map(|u| (0..u.info_bits()).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    let symbols: Vec<_> = ues
        .iter()
        .zip(&blocks)
        .map(|(u, tb)| transmit_symbols(tb, u, &frame.layout(u.signature).expect("layout")).expect("symbols"))
        .collect();
    let received = compose_received(&frame, &ues, &symbols, &channel, 1.0, &mut rng).expect("frame");
    LinkFixture { frame, ues, channel, received, blocks }
}
