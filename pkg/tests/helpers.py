from smallnoise.model import control_from_subsolution, zero_control


def sub_control(problem):
    return control_from_subsolution(problem.subsolution, problem.spec.model)


def zero(problem):
    return zero_control(problem.spec.dim)
