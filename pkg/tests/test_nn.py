"""Tests for the hand-differentiated MLP"""

import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from pixelveil.data_io import LabeledDataset, NormStats
from pixelveil.errors import (
    EmptyDatasetError,
    InvalidSpecError,
    ShapeMismatchError,
    TrainingDivergedError,
    ValidationError,
)
from pixelveil.nn import (
    LayerSpec,
    NetworkParams,
    TrainConfig,
    backward,
    build_mlp,
    detector_score,
    evaluate,
    fine_tune,
    forward,
    hidden_activations,
    load_checkpoint,
    perceptron_detector,
    predict,
    prune_neurons,
    save_checkpoint,
    train,
)
from pixelveil.trigger import TriggerSpec, generate_trigger


def _linear(weights, biases, softmax=True) -> NetworkParams:
    """Single dense layer, optionally with a softmax head"""
    w = np.asarray(weights, dtype=np.float64)
    layers = [LayerSpec.dense(*w.shape)]
    if softmax:
        layers.append(LayerSpec.softmax_xent())
    return NetworkParams(tuple(layers), [w], [np.asarray(biases, dtype=np.float64)])


def _small_net(seed: int = 0) -> NetworkParams:
    """3 -> 3 -> 2 with a leaky ReLU: 20 parameters"""
    rng = np.random.default_rng(seed)
    layers = (LayerSpec.dense(3, 3), LayerSpec.leaky_relu(0.2),
              LayerSpec.dense(3, 2), LayerSpec.softmax_xent())
    return NetworkParams(layers, [rng.normal(size=(3, 3)), rng.normal(size=(3, 2))],
                         [rng.normal(size=3), rng.normal(size=2)])


class TestBuildMlp(unittest.TestCase):
    """Test network construction"""

    def test_param_count(self):
        """Test the 784-256-128-10 parameter count"""
        params = build_mlp(784, (256, 128), 10)
        self.assertEqual(params.num_params, 235146)
        kinds = [spec.kind for spec in params.layers]
        self.assertEqual(kinds, ["dense", "leaky_relu", "dropout", "dense", "leaky_relu",
                                 "dropout", "dense", "softmax_xent"])

    def test_seeded(self):
        """Test the same seed gives the same weights"""
        self.assertEqual(build_mlp(10, (5, 4), 3, seed=4).checksum(),
                         build_mlp(10, (5, 4), 3, seed=4).checksum())
        self.assertNotEqual(build_mlp(10, (5, 4), 3, seed=4).checksum(),
                            build_mlp(10, (5, 4), 3, seed=5).checksum())

    def test_zero_width(self):
        """Test a zero hidden width is refused"""
        with self.assertRaises(InvalidSpecError):
            build_mlp(10, (0, 4), 3)

    def test_init_range(self):
        """Test weights start within ±1/sqrt(fan_in)"""
        params = build_mlp(16, (8, 4), 3)
        for w in params.weights:
            self.assertLessEqual(np.abs(w).max(), 1.0 / np.sqrt(w.shape[0]))


class TestForward(unittest.TestCase):
    """Test the forward pass"""

    def test_zero_weights_uniform(self):
        """Test zero weights give uniform probabilities"""
        params = _linear(np.zeros((4, 5)), np.zeros(5))
        probs = forward(params, np.ones((2, 4)))
        self.assertTrue(np.allclose(probs, 0.2))

    def test_softmax_arithmetic(self):
        """Test logits (0, ln 3) give probabilities (0.25, 0.75)"""
        params = _linear(np.zeros((1, 2)), [0.0, np.log(3.0)])
        probs = forward(params, np.zeros((1, 1)))
        self.assertTrue(np.allclose(probs, [[0.25, 0.75]]))

    def test_probabilities(self):
        """Test outputs are non-negative and sum to one"""
        params = build_mlp(12, (6, 5), 4, seed=2)
        x = np.random.default_rng(0).integers(0, 256, (20, 12))
        probs = forward(params, x)
        self.assertTrue(np.all(probs >= 0))
        self.assertTrue(np.allclose(probs.sum(axis=1), 1.0, atol=1e-6))

    def test_shift_invariance(self):
        """Test adding a constant to every logit changes nothing"""
        params = _small_net()
        shifted = params.copy()
        shifted.biases[-1] = shifted.biases[-1] + 50.0
        x = np.random.default_rng(1).normal(size=(5, 3))
        self.assertTrue(np.allclose(forward(params, x), forward(shifted, x)))

    def test_shape_mismatch(self):
        """Test a wrong input dimension is refused"""
        with self.assertRaises(ShapeMismatchError):
            forward(_small_net(), np.zeros((1, 4)))

    def test_bad_mode(self):
        """Test unknown modes are refused"""
        with self.assertRaises(ValidationError):
            forward(_small_net(), np.zeros((1, 3)), mode="infer")

    def test_normalization(self):
        """Test inputs are normalized per channel before the first layer"""
        params = _linear(np.eye(2), np.zeros(2), softmax=False)
        params.normalization = NormStats((10.0,), (5.0,))
        out = forward(params, np.array([[20.0, 0.0]]))
        self.assertTrue(np.allclose(out, [[2.0, -2.0]]))

    def test_dropout_eval_identity(self):
        """Test eval mode ignores dropout"""
        layers = (LayerSpec.dense(2, 3), LayerSpec.dropout(0.5), LayerSpec.dense(3, 2))
        rng = np.random.default_rng(0)
        with_dropout = NetworkParams(layers, [rng.normal(size=(2, 3)), rng.normal(size=(3, 2))],
                                     [np.zeros(3), np.zeros(2)])
        without = NetworkParams((layers[0], layers[2]), with_dropout.weights, with_dropout.biases)
        x = rng.normal(size=(4, 2))
        self.assertTrue(np.array_equal(forward(with_dropout, x), forward(without, x)))

    def test_inverted_dropout_expectation(self):
        """Test the mean train-mode output matches eval mode"""
        layers = (LayerSpec.dense(2, 50), LayerSpec.dropout(0.5), LayerSpec.dense(50, 2))
        params = NetworkParams(layers, [np.ones((2, 50)), np.full((50, 2), 0.1)],
                               [np.zeros(50), np.zeros(2)])
        x = np.ones((10000, 2))
        expected = forward(params, x[:1])[0]
        mean = forward(params, x, mode="train", rng=np.random.default_rng(0)).mean(axis=0)
        self.assertTrue(np.allclose(mean, expected, rtol=0.02))


class TestBackward(unittest.TestCase):
    """Test analytic gradients"""

    def test_finite_differences(self):
        """Test gradients match central differences"""
        params = _small_net(seed=3)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 2, 6)
        _, grads = backward(params, x, y)

        h = 1e-4
        analytic, numeric = [], []
        for k in range(len(params.weights)):
            for tensor_name, grad in (("weights", grads[k][0]), ("biases", grads[k][1])):
                tensor = getattr(params, tensor_name)[k]
                for idx in np.ndindex(tensor.shape):
                    plus, minus = params.copy(), params.copy()
                    getattr(plus, tensor_name)[k][idx] += h
                    getattr(minus, tensor_name)[k][idx] -= h
                    diff = (backward(plus, x, y)[0] - backward(minus, x, y)[0]) / (2 * h)
                    analytic.append(grad[idx])
                    numeric.append(diff)

        analytic, numeric = np.array(analytic), np.array(numeric)
        self.assertEqual(len(analytic), 20)
        scale = max(np.abs(analytic).max(), 1e-6)
        self.assertLessEqual(np.abs(analytic - numeric).max() / scale, 1e-4)

    def test_saturated_zero_gradient(self):
        """Test a confident correct prediction has a vanishing gradient"""
        params = _linear(np.zeros((1, 2)), [0.0, 100.0])
        loss, grads = backward(params, np.zeros((1, 1)), [1])
        self.assertLess(loss, 1e-6)
        norm = np.sqrt(sum((gw ** 2).sum() + (gb ** 2).sum() for gw, gb in grads))
        self.assertLessEqual(norm, 1e-6)

    def test_duplicate_sample(self):
        """Test a duplicated sample has the single-sample gradient"""
        params = _small_net(seed=1)
        x = np.array([[0.3, -1.2, 0.8]])
        loss1, grads1 = backward(params, x, [1])
        loss2, grads2 = backward(params, np.vstack([x, x]), [1, 1])
        self.assertAlmostEqual(loss1, loss2)
        for (a, b), (c, d) in zip(grads1, grads2):
            self.assertTrue(np.allclose(a, c))
            self.assertTrue(np.allclose(b, d))

    def test_label_count(self):
        """Test labels must match the batch"""
        with self.assertRaises(ShapeMismatchError):
            backward(_small_net(), np.zeros((2, 3)), [0])


class TestTrain(unittest.TestCase):
    """Test SGD training"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.dataset = LabeledDataset(rng.integers(0, 256, (30, 2, 2, 1), dtype=np.uint8),
                                      rng.integers(0, 3, 30), 3)
        self.stats = NormStats((127.5,), (127.5,))

    def test_overfit_single_sample(self):
        """Test one sample is memorized within 200 steps"""
        params = build_mlp(4, (8, 8), 3, dropout=0.0, seed=1)
        config = TrainConfig(learning_rate=0.1, epochs=200, batch_size=1, weight_decay=0.0,
                             normalization=self.stats)
        result = train(params, self.dataset.take(1), config)
        self.assertEqual(len(result.loss_history), 200)
        self.assertLess(result.loss_history[-1], 0.01)

    def test_zero_epochs(self):
        """Test zero epochs leaves the weights alone"""
        params = build_mlp(4, (8, 8), 3)
        result = train(params, self.dataset, TrainConfig(epochs=0))
        self.assertEqual(result.params.checksum(), params.checksum())
        self.assertEqual(result.loss_history, [])

    def test_deterministic(self):
        """Test fixed seeds give identical final weights"""
        params = build_mlp(4, (8, 8), 3)
        config = TrainConfig(epochs=3, batch_size=8, seed=9, normalization=self.stats,
                             augment=("flip",))
        a = train(params, self.dataset, config)
        b = train(params, self.dataset, config)
        self.assertEqual(a.params.checksum(), b.params.checksum())
        self.assertEqual(a.loss_history, b.loss_history)

    def test_input_untouched(self):
        """Test training works on a copy"""
        params = build_mlp(4, (8, 8), 3)
        before = params.checksum()
        train(params, self.dataset, TrainConfig(epochs=1, normalization=self.stats))
        self.assertEqual(params.checksum(), before)

    def test_divergence(self):
        """Test a NaN loss aborts training"""
        params = build_mlp(4, (8, 8), 3)
        config = TrainConfig(epochs=1, normalization=NormStats((float("nan"),), (1.0,)))
        with self.assertRaises(TrainingDivergedError):
            train(params, self.dataset, config)

    def test_fine_tune_keeps_normalization(self):
        """Test fine-tuning reuses the model's normalization"""
        params = build_mlp(4, (8, 8), 3, normalization=self.stats)
        tuned = fine_tune(params, self.dataset, TrainConfig(epochs=0))
        self.assertEqual(tuned.normalization, self.stats)

    def test_config_validation(self):
        """Test invalid hyperparameters are refused"""
        with self.assertRaises(ValidationError):
            TrainConfig(learning_rate=0.0)
        with self.assertRaises(ValidationError):
            TrainConfig(augment=("shear",))


class TestEvaluate(unittest.TestCase):
    """Test accuracy and prediction"""

    def setUp(self):
        # class 0 wins when x > 100
        self.params = _linear([[1.0, -1.0]], [-100.0, 100.0])

    def test_three_of_four(self):
        """Test 3 of 4 correct gives 0.75"""
        images = np.array([200, 200, 10, 10], dtype=np.uint8).reshape(4, 1, 1, 1)
        dataset = LabeledDataset(images, [0, 0, 1, 0], 2)
        accuracy, preds = evaluate(self.params, dataset)
        self.assertEqual(accuracy, 0.75)
        self.assertEqual(preds.tolist(), [0, 0, 1, 1])

    def test_all_correct(self):
        """Test a model matching every label scores 1.0"""
        images = np.array([200, 10], dtype=np.uint8).reshape(2, 1, 1, 1)
        accuracy, _ = evaluate(self.params, LabeledDataset(images, [0, 1], 2))
        self.assertEqual(accuracy, 1.0)

    def test_empty(self):
        """Test an empty dataset is an error"""
        empty = LabeledDataset(np.zeros((0, 1, 1, 1), dtype=np.uint8), [], 2)
        with self.assertRaises(EmptyDatasetError):
            evaluate(self.params, empty)

    def test_ties_lowest_index(self):
        """Test ties resolve to the lowest class"""
        params = _linear(np.zeros((1, 3)), np.zeros(3))
        self.assertEqual(predict(params, np.zeros((2, 1))).tolist(), [0, 0])


class TestHiddenActivations(unittest.TestCase):
    """Test hidden representation extraction"""

    def setUp(self):
        layers = (LayerSpec.dense(1, 1), LayerSpec.leaky_relu(0.2),
                  LayerSpec.dense(1, 2), LayerSpec.softmax_xent())
        self.params = NetworkParams(layers, [np.ones((1, 1)), np.ones((1, 2))],
                                    [np.zeros(1), np.zeros(2)])

    def test_leaky_slope(self):
        """Test input -1 through identity dense and leaky ReLU gives -0.2"""
        acts = hidden_activations(self.params, np.array([[-1.0]]))
        self.assertTrue(np.allclose(acts, [[-0.2]]))

    def test_zero_weights(self):
        """Test zero weights give zero activations"""
        params = build_mlp(4, (3, 2), 2)
        params = NetworkParams(params.layers, [np.zeros_like(w) for w in params.weights],
                               [np.zeros_like(b) for b in params.biases])
        acts = hidden_activations(params, np.ones((5, 4)))
        self.assertEqual(acts.shape, (5, 2))
        self.assertFalse(acts.any())

    def test_bad_index(self):
        """Test a dense layer is not a valid activation point"""
        with self.assertRaises(ValidationError):
            hidden_activations(self.params, np.zeros((1, 1)), layer_index=0)


class TestPrune(unittest.TestCase):
    """Test dormant-neuron pruning"""

    def setUp(self):
        rng = np.random.default_rng(0)
        layers = (LayerSpec.dense(2, 3), LayerSpec.leaky_relu(0.2),
                  LayerSpec.dense(3, 2), LayerSpec.softmax_xent())
        w1 = np.array([[1.0, -1.0, 0.0], [0.5, 1.0, 0.0]])
        w2 = np.array([[1.0, -1.0], [-1.0, 1.0], [0.0, 0.0]])
        self.params = NetworkParams(layers, [w1, w2], [np.array([0.1, 0.2, 0.0]), np.zeros(2)])
        images = rng.integers(0, 256, (40, 1, 2, 1), dtype=np.uint8)
        labels = predict(self.params, images)
        self.clean = LabeledDataset(images, labels, 2)

    def test_dead_neuron_first(self):
        """Test the dead neuron goes first without hurting accuracy"""
        result = prune_neurons(self.params, self.clean, budget=0.0)
        self.assertEqual(result.pruned_neurons[0], 2)
        self.assertEqual(result.baseline_accuracy, 1.0)
        self.assertGreaterEqual(result.final_accuracy, result.baseline_accuracy)
        self.assertFalse(result.params.weights[-1][2].any())

    def test_budget_respected(self):
        """Test accuracy never drops more than the budget"""
        for budget in (0.0, 0.1, 0.5):
            result = prune_neurons(self.params, self.clean, budget=budget)
            self.assertLessEqual(result.baseline_accuracy - result.final_accuracy, budget)
            self.assertEqual(result.pruned_count, len(result.pruned_neurons))

    def test_empty(self):
        """Test pruning needs clean data"""
        with self.assertRaises(EmptyDatasetError):
            prune_neurons(self.params, self.clean.take(0))


class TestPerceptronDetector(unittest.TestCase):
    """Test the matched-filter detector"""

    def setUp(self):
        self.trigger = generate_trigger(TriggerSpec(seed="cd" * 32, magnitude_m=3))
        self.detector = perceptron_detector(self.trigger)

    def test_absent(self):
        """Test a zero image scores the negative bias"""
        score = detector_score(self.detector, np.zeros((1, 28 * 28)))
        self.assertAlmostEqual(float(score[0]), -9 * 320 / 2)

    def test_present(self):
        """Test the trigger itself scores m²M/2"""
        score = detector_score(self.detector, self.trigger.values[np.newaxis])
        self.assertAlmostEqual(float(score[0]), 9 * 320 / 2)


class TestCheckpoint(unittest.TestCase):
    """Test model persistence"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_round_trip(self):
        """Test a checkpoint reloads bit-exactly"""
        params = build_mlp(6, (4, 3), 2, normalization=NormStats((3.0,), (2.0,)), seed=8)
        path = self.temp_dir / "model.npz"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        self.assertEqual(loaded.checksum(), params.checksum())
        self.assertEqual(loaded.layers, params.layers)
        self.assertEqual(loaded.normalization, params.normalization)


if __name__ == "__main__":
    unittest.main()
