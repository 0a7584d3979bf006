"""scikit-learn style front end: fit on a corpus, transform videos, predict moments."""

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from .encoders import ModelConfig
from .retrieval import build_corpus_index, encode_queries, vcmr_rank
from .training import RunConfig, evaluate, model_config_for, train
from .validation import check_corpus, check_positive_int, check_probability, check_query_list


class ReLoCLNet(BaseEstimator):
    """Video corpus moment retrieval with optional contrastive objectives.

    Parameters
    ----------
    d : int
        Hidden width of every encoder block.
    epochs, batch_size, lr, weight_decay, warmup_proportion, patience, min_epochs
        Training schedule; see :class:`reloclnet.training.RunConfig`.
    vr, ml, video_cl, frame_cl : bool
        Objective gates. ``video_cl=False, frame_cl=False`` gives ReLoNet.
    top_k, top_n, l_max, gamma
        Retrieval parameters used by :meth:`predict` and :meth:`evaluate`.
    subtitle_enabled : bool
        Use the subtitle stream when the corpus carries one.
    dropout : float
    random_state : int
        Seeds weight init, dropout and batch order.
    log_path : str or None
        Optional JSON-lines training log.

    Attributes
    ----------
    model_ : ReLoCLNetModel
    history_ : list of dict
    best_epoch_ : int
    """

    def __init__(self, d=64, epochs=200, batch_size=16, lr=3e-4, weight_decay=0.01, warmup_proportion=0.01,
                 patience=10, min_epochs=50, vr=True, ml=True, video_cl=True, frame_cl=True, top_k=100, top_n=10, l_max=16,
                 gamma=30.0, subtitle_enabled=True, dropout=0.1, random_state=0, log_path=None):
        self.d = d
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_proportion = warmup_proportion
        self.patience = patience
        self.min_epochs = min_epochs
        self.vr = vr
        self.ml = ml
        self.video_cl = video_cl
        self.frame_cl = frame_cl
        self.top_k = top_k
        self.top_n = top_n
        self.l_max = l_max
        self.gamma = gamma
        self.subtitle_enabled = subtitle_enabled
        self.dropout = dropout
        self.random_state = random_state
        self.log_path = log_path

    def _run_config(self, corpus):
        check_positive_int(self.epochs, "epochs")
        check_positive_int(self.batch_size, "batch_size", 2)
        check_probability(self.dropout, "dropout")
        check_probability(self.warmup_proportion, "warmup_proportion", closed_right=True)
        base = ModelConfig(d=self.d, dropout=self.dropout, top_k=self.top_k, top_n=self.top_n, l_max=self.l_max,
                           gamma=self.gamma, subtitle_enabled=self.subtitle_enabled, seed=self.random_state)
        return RunConfig(model=model_config_for(corpus, base), gates=(self.vr, self.ml, self.video_cl, self.frame_cl),
                         epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                         weight_decay=self.weight_decay, warmup_proportion=self.warmup_proportion,
                         patience=self.patience, min_epochs=self.min_epochs, seed=self.random_state)

    def fit(self, corpus, y=None):
        """Train on ``corpus``; its ``val`` split (if any) drives early stopping."""
        check_corpus(corpus)
        run = self._run_config(corpus)
        result = train(run, corpus, log_path=self.log_path)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.run_config_ = run
        return self

    def transform(self, videos):
        """Encode ``videos`` (dict or list of VideoRecord) into a :class:`CorpusIndex`."""
        check_is_fitted(self, "model_")
        return build_corpus_index(videos, self.model_)

    def fit_transform(self, corpus, y=None):
        return self.fit(corpus).transform(corpus.videos)

    def predict(self, queries, index):
        """Ranked :class:`MomentPrediction` lists, one per query feature array."""
        check_is_fitted(self, "model_")
        queries = check_query_list(queries, self.model_.config.d_w)
        index.check_fingerprint(self.model_.fingerprint())
        encoded = encode_queries(self.model_, queries)
        return [vcmr_rank(self.model_, q, index, self.top_k, self.top_n, self.l_max, self.gamma) for q in encoded]

    def evaluate(self, corpus, index=None, mu_grid=None):
        check_is_fitted(self, "model_")
        check_corpus(corpus)
        return evaluate(self.model_, corpus, index=index, mu_grid=mu_grid, k=self.top_k, top_n=self.top_n,
                        l_max=self.l_max, gamma=self.gamma)

    def score(self, corpus, y=None):
        """VCMR Recall@10 at IoU 0.5 on the annotations of ``corpus``."""
        return self.evaluate(corpus).vcmr["R@10,IoU=0.5"]

    def save(self, path):
        check_is_fitted(self, "model_")
        return checkpoint.save_model(self.model_, path, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        model, config, _ = checkpoint.load_model(path)
        est = cls(**config.get("estimator", {}))
        est.model_ = model
        est.history_, est.best_epoch_ = [], None
        return est


def relonet(**params):
    """ReLoCLNet with both contrastive objectives switched off."""
    params = dict(params, video_cl=False, frame_cl=False)
    return ReLoCLNet(**params)


__all__ = ["ReLoCLNet", "relonet"]
