"""Train on 16 scenes and check that greedy detection recovers them."""
import logging

from seqdet3d.experiments import LN_VOCAB, overfit


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = overfit()
    print(f"initial loss {res.init_loss:.4f} (ln V = {LN_VOCAB:.4f})")
    print(f"training {res.seconds:.0f}s")
    print(res.report.to_text())


if __name__ == "__main__":
    main()
