use covidscreen::dataset::stratified_split;
use covidscreen::model::{build_classifier, lookup, HeadWidths};
use covidscreen::synthetic::solid_intensity;
use covidscreen::training::{train, TrainingConfig};

#[test]
fn solid_intensity_classes_are_learned_in_ten_epochs() {
    for seed in [0u64, 1, 2] {
        let data = solid_intensity(50, 32, seed).unwrap();
        let split = stratified_split(&data, 0.8, seed).unwrap();
        let model = build_classifier(&lookup("TinyCNN").unwrap(), HeadWidths::default(), seed).unwrap();
        let checksum = model.backbone_checksum();
        let config = TrainingConfig {
            epochs: 10,
            seed,
            ..Default::default()
        };
        let (trained, trace) = train(model, &split.train, &split.test, &config).unwrap();
        assert_eq!(trace.len(), 10);
        let last = trace.train_accuracy[9];
        assert!(last >= 0.99, "seed {seed}: final train accuracy {last}");
        assert_eq!(trained.backbone_checksum(), checksum);
    }
}
