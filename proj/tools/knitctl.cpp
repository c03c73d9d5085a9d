// knitctl: command-line front end for the toolkit.
//
//   knitctl run <plan> [--workers N]
//   knitctl gen-synth <spec> [--out DIR]
//   knitctl analyze <ckpt> --kind=<mi|diffmask|mask-dump> [--out DIR] [--workers N]
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "knit/plan.hpp"

int main(int argc, char** argv) {
    CLI::App app{"transformer knowledge-integration toolkit"};
    app.require_subcommand(1);

    std::string plan_path, spec_path, ckpt_path, kind;
    std::string out_dir = "out";
    int workers = 1;

    auto* run = app.add_subcommand("run", "execute an experiment plan end to end");
    run->add_option("plan", plan_path, "plan file (key=value)")->required();
    run->add_option("--workers", workers, "concurrent training runs");

    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic benchmark corpus");
    gen->add_option("spec", spec_path, "spec file (key=value)")->required();
    gen->add_option("--out", out_dir, "output directory");

    auto* ana = app.add_subcommand("analyze", "run an analysis over a trained checkpoint");
    ana->add_option("ckpt", ckpt_path, "checkpoint file written by `run`")->required();
    ana->add_option("--kind", kind, "mi | diffmask | mask-dump")->required();
    ana->add_option("--out", out_dir, "output directory");
    ana->add_option("--workers", workers, "parallel heatmap rendering");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            const auto plan = knit::parse_plan(plan_path);
            const auto outputs = knit::cmd_run(plan, workers);
            for (const auto& s : outputs.summary)
                std::printf("%-10s median %-10s %.6f  (lr %g, lambda %g)\n",
                            knit::method_name(s.method).c_str(),
                            knit::metric_name(plan.metric).c_str(), s.median, s.lr, s.lambda);
            std::printf("artifacts written to %s\n", plan.out_dir.c_str());
        } else if (gen->parsed()) {
            const auto data = knit::cmd_gen_synth(spec_path, out_dir);
            std::printf("wrote %zu train / %zu dev sentences and %zu entities to %s\n",
                        data.train.size(), data.dev.size(), data.entities.size(),
                        out_dir.c_str());
        } else {
            knit::cmd_analyze(ckpt_path, kind, out_dir, workers);
            std::printf("%s artifacts written to %s\n", kind.c_str(), out_dir.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
