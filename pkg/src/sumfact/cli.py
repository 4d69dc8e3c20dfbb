"""Command-line driver.

Subcommands::

  sumfact compile --form laplace --cell hex --degree 4 --mode spectral \
      --emit c --report --out build/
  sumfact sweep --form laplace --cell hex --mode spectral --degree 2:8

Reports are single-line JSON records with keys
{form, cell, degree, mode, flops, table_bytes, kernel_hash}; a sweep prints
one record per degree followed by a {"slope": ...} record fitted against
log(n+1).

Element specification strings (``--element``) use the grammar:

  atom     := P<k> | dP<k> | GLL<k> | GL<k> | triP<k>
  element  := atom | element * element      (tensor product, left assoc.)
            | element + element             (enriched / direct sum)
            | hdiv(element) | hcurl(element)
            | V(element, d) | T(element, d)  (vector / rank-2 tensor)

``P``/``GLL`` are continuous interval families, ``dP``/``GL`` discontinuous;
``triP`` is the triangle Lagrange family.  The default element for a form is
derived from --cell/--degree/--variant; --element overrides it.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

import numpy as np

from . import scheduling
from .elements import (
    InvalidDegree, Unsupported, discontinuous_lagrange_interval,
    enriched_element, hcurl_wrap, hdiv_wrap, lagrange_interval,
    tensor_product_element, tensor_element, triangle_lagrange, vector_element,
)
from .forms import (
    CELLS, REGISTRY, UnsupportedCell, coefficient_element, default_quadrature,
    form_element, lower_form,
)
from .passes import MODES, run_pipeline

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# element specification strings


_ATOM = re.compile(r"(triP|dP|P|GLL|GL)(\d+)")


class _ElementParser:
    def __init__(self, text, variant):
        self.text = text.replace(" ", "")
        self.pos = 0
        self.variant = variant

    def fail(self, why):
        raise UsageError("bad element spec %r at position %d: %s"
                         % (self.text, self.pos, why))

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self):
        e = self.sum()
        if self.pos != len(self.text):
            self.fail("trailing input")
        return e

    def sum(self):
        parts = [self.product()]
        while self.peek() == "+":
            self.pos += 1
            parts.append(self.product())
        return parts[0] if len(parts) == 1 else enriched_element(parts)

    def product(self):
        e = self.atom()
        while self.peek() == "*":
            self.pos += 1
            e = tensor_product_element(e, self.atom())
        return e

    def atom(self):
        for name, wrap in (("hdiv", hdiv_wrap), ("hcurl", hcurl_wrap)):
            if self.text.startswith(name + "(", self.pos):
                self.pos += len(name) + 1
                inner = self.sum()
                if self.peek() != ")":
                    self.fail("expected )")
                self.pos += 1
                return wrap(inner)
        for name, make in (("V", vector_element),
                           ("T", lambda e, d: tensor_element(e, (d, d)))):
            if self.text.startswith(name + "(", self.pos):
                self.pos += len(name) + 1
                inner = self.sum()
                if self.peek() != ",":
                    self.fail("expected ,")
                self.pos += 1
                m = re.match(r"\d+", self.text[self.pos:])
                if not m:
                    self.fail("expected a dimension")
                self.pos += len(m.group())
                if self.peek() != ")":
                    self.fail("expected )")
                self.pos += 1
                return make(inner, int(m.group()))
        if self.peek() == "(":
            self.pos += 1
            e = self.sum()
            if self.peek() != ")":
                self.fail("expected )")
            self.pos += 1
            return e
        m = _ATOM.match(self.text, self.pos)
        if not m:
            self.fail("expected an element atom")
        self.pos = m.end()
        family, k = m.group(1), int(m.group(2))
        if family == "P":
            return lagrange_interval(k, self.variant if self.variant
                                     in ("equispaced", "spectral_gll") else "equispaced")
        if family == "dP":
            return discontinuous_lagrange_interval(k)
        if family == "GLL":
            return lagrange_interval(k, "spectral_gll")
        if family == "GL":
            return lagrange_interval(k, "spectral_gl")
        return triangle_lagrange(k)


def parse_element_spec(text, variant="equispaced"):
    return _ElementParser(text, variant).parse()


# ---------------------------------------------------------------------------
# compilation


def build_request(form, cell, degree, mode, variant="equispaced",
                  quadrature=None, element_spec=None):
    """Validate and resolve a compile request to (kernel, element, rule)."""
    if form not in REGISTRY:
        raise UsageError("unknown form %r (choose from %s)"
                         % (form, ", ".join(sorted(REGISTRY))))
    if cell not in CELLS:
        raise UsageError("unknown cell %r" % cell)
    if mode not in MODES:
        raise UsageError("unknown mode %r" % mode)
    if degree < 1:
        raise UsageError("degree must be >= 1")
    spec = REGISTRY[form]

    collocated = False
    points = None
    if quadrature is not None:
        if quadrature == "collocated-gll":
            if variant != "spectral_gll":
                raise UsageError(
                    "--quadrature collocated-gll requires --variant "
                    "spectral_gll: collocation must match the element nodes")
            if cell not in ("interval", "quad", "hex"):
                raise UsageError("collocated-gll quadrature needs a box cell")
            collocated = True
        else:
            try:
                points = int(quadrature)
            except ValueError:
                raise UsageError("--quadrature takes an integer point count "
                                 "per direction or 'collocated-gll'") from None
            if points < 1:
                raise UsageError("quadrature needs at least one point")

    try:
        if element_spec is not None:
            element = parse_element_spec(element_spec, variant)
            if element.cell.dimension != {"interval": 1, "quad": 2,
                                          "triangle": 2, "hex": 3,
                                          "prism": 3}[cell]:
                raise UsageError("element spec dimension does not match cell")
        else:
            element = form_element(spec, cell, degree, variant)
        rule = default_quadrature(cell, degree, points_per_direction=points,
                                  collocated_gll=collocated)
        coeff_elements = [
            coefficient_element(spec, fam, cell, degree, variant)
            for (_order, fam) in spec.coefficient_slots]
        kernel = lower_form(spec, element, rule, cell,
                            coeff_elements=coeff_elements,
                            meta={"mode": mode, "variant": variant})
    except (Unsupported, UnsupportedCell, InvalidDegree) as e:
        raise UsageError(str(e)) from e
    return kernel


def compile_kernel(form, cell, degree, mode, variant="equispaced",
                   quadrature=None, element_spec=None):
    kernel = build_request(form, cell, degree, mode, variant, quadrature,
                           element_spec)
    optimised = run_pipeline(kernel, mode)
    program = scheduling.schedule(optimised)
    return program


def report_record(program):
    rep = scheduling.program_report(program)
    meta = {k: program.meta.get(k) for k in ("form", "cell", "degree", "mode")}
    rec = rep.record(meta)
    if program.meta.get("form", "").endswith("curl_curl"):
        rec["note"] = ("curl assembled in reference coordinates (no Piola "
                       "pullback)")
    return rec


def cmd_compile(args):
    program = compile_kernel(args.form, args.cell, args.degree, args.mode,
                             args.variant, args.quadrature, args.element)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    base = "%s_%s_p%d_%s" % (args.form, args.cell, args.degree, args.mode)
    if args.emit in ("c", "both"):
        text = scheduling.emit_c(program)
        if args.out:
            with open(os.path.join(args.out, base + ".c"), "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    if args.emit in ("program", "both"):
        text = scheduling.serialize_program(program)
        if args.out:
            with open(os.path.join(args.out, base + ".json"), "w") as fh:
                fh.write(text + "\n")
        else:
            sys.stdout.write(text + "\n")
    if args.report:
        print(json.dumps(report_record(program), sort_keys=True))
    return EXIT_OK


def parse_degree_range(text):
    m = re.fullmatch(r"(\d+)[:.][.]?(\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo > hi:
            raise UsageError("empty degree range %r" % text)
        return list(range(lo, hi + 1))
    try:
        return [int(text)]
    except ValueError:
        raise UsageError("bad degree or range %r (use N or A:B)" % text) from None


def fit_slope(degrees, flop_counts):
    x = np.log(np.asarray(degrees, dtype=float) + 1.0)
    y = np.log(np.asarray(flop_counts, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def cmd_sweep(args):
    degrees = parse_degree_range(args.degree)
    if len(degrees) < 2:
        raise UsageError("a sweep needs at least two degrees")
    records = []
    for n in degrees:
        program = compile_kernel(args.form, args.cell, n, args.mode,
                                 args.variant, args.quadrature, args.element)
        rec = report_record(program)
        records.append(rec)
        print(json.dumps(rec, sort_keys=True))
    slope = fit_slope(degrees, [r["flops"] for r in records])
    print(json.dumps({"form": args.form, "cell": args.cell, "mode": args.mode,
                      "slope": slope}, sort_keys=True))
    return EXIT_OK


def make_parser():
    parser = argparse.ArgumentParser(
        prog="sumfact",
        description="Compile finite element assembly kernels with "
                    "sum-factorised tensor algebra.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--form", required=True)
        p.add_argument("--cell", required=True, choices=CELLS)
        p.add_argument("--mode", default="spectral", choices=MODES)
        p.add_argument("--variant", default="equispaced",
                       choices=("equispaced", "spectral_gll", "spectral_gl"))
        p.add_argument("--quadrature", default=None,
                       help="points per direction, or 'collocated-gll'")
        p.add_argument("--element", default=None,
                       help="element spec string (see module docs)")

    pc = sub.add_parser("compile", help="compile one kernel")
    common(pc)
    pc.add_argument("--degree", required=True, type=int)
    pc.add_argument("--emit", default="c", choices=("c", "program", "both"))
    pc.add_argument("--report", action="store_true")
    pc.add_argument("--out", default=None)
    pc.set_defaults(func=cmd_compile)

    ps = sub.add_parser("sweep", help="compile a degree range and fit the "
                                      "log-log flop slope")
    common(ps)
    ps.add_argument("--degree", required=True,
                    help="degree range A:B (inclusive)")
    ps.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # internal pass failure
        print("internal error in %s: %s" % (type(e).__name__, e),
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
